//! Seeded synthetic corpus: random planar road graphs rendered to textured
//! imagery, with a clean mask and a deliberately degraded one per tile.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geo::{write_world_file, GeoError, GeoTransform};
use crate::graph::{write_graph, GraphError, SpatialGraph};
use crate::manifest::{Manifest, ManifestError, ManifestRecord};
use crate::raster::{draw_polyline, is_foreground, write_image, Raster, RasterError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad noise spec: {0}")]
    BadNoiseSpec(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Degradations applied to the training mask, mimicking labels traced from
/// slightly wrong vector data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Stroke width varies by up to this many pixels either way.
    pub jitter_px: f64,
    /// Probability a whole road segment goes missing.
    pub dropout: f64,
    /// Centerlines shift by this distance in a random direction.
    pub offset_px: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            jitter_px: 2.0,
            dropout: 0.1,
            offset_px: 1.5,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            jitter_px: 0.0,
            dropout: 0.0,
            offset_px: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.jitter_px >= 0.0) || !(self.offset_px >= 0.0) {
            return Err(SynthError::BadNoiseSpec(format!(
                "jitter and offset must be non-negative, got {} and {}",
                self.jitter_px, self.offset_px
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(SynthError::BadNoiseSpec(format!(
                "dropout must lie in [0, 1], got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// "jitter=2,dropout=0.1,offset=1.5"; omitted keys keep their defaults and
/// the empty string means all defaults.
impl FromStr for NoiseSpec {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        let mut spec = NoiseSpec::default();
        let trimmed = s.trim();
        if !trimmed.is_empty() {
            for part in trimmed.split(',') {
                let (key, value) = part
                    .split_once('=')
                    .ok_or_else(|| SynthError::BadNoiseSpec(format!("expected key=value, got {part:?}")))?;
                let value: f64 = value.trim().parse().map_err(|_| {
                    SynthError::BadNoiseSpec(format!("{:?} is not a number", value.trim()))
                })?;
                match key.trim() {
                    "jitter" => spec.jitter_px = value,
                    "dropout" => spec.dropout = value,
                    "offset" => spec.offset_px = value,
                    other => {
                        return Err(SynthError::BadNoiseSpec(format!(
                            "unknown key {other:?} (expected jitter, dropout, offset)"
                        )))
                    }
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "jitter={},dropout={},offset={}",
            self.jitter_px, self.dropout, self.offset_px
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Tile size as (height, width).
    pub size: (usize, usize),
    /// Road junction/endpoint count per tile.
    pub nodes: usize,
    pub road_width: u32,
    /// Minimum distance between any two placed nodes.
    pub min_sep: f64,
    pub noise: NoiseSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: (256, 256),
            nodes: 8,
            road_width: 5,
            min_sep: 24.0,
            noise: NoiseSpec::default(),
        }
    }
}

/// splitmix-style finalizer; decouples per-tile streams from the corpus seed
/// so tile i is the same no matter how many tiles are generated.
fn mix_seed(seed: u64, tile: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tile.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random road network: uniformly placed nodes (kept `min_sep` apart, inside
/// a `margin`) joined by the relative neighborhood rule, where an edge
/// survives unless some third node is closer to both its endpoints. The
/// result always contains a spanning tree, so it is connected.
pub fn random_road_graph(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    nodes: usize,
    margin: f64,
    min_sep: f64,
) -> SpatialGraph {
    let mut g = SpatialGraph::new();
    let (hf, wf) = (h as f64, w as f64);
    if wf - 2.0 * margin <= 0.0 || hf - 2.0 * margin <= 0.0 {
        return g;
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(nodes);
    let mut attempts = 0usize;
    while pts.len() < nodes && attempts < 200 * nodes.max(1) {
        attempts += 1;
        let p = (
            rng.gen_range(margin..=wf - margin),
            rng.gen_range(margin..=hf - margin),
        );
        if pts
            .iter()
            .all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= min_sep)
        {
            pts.push(p);
        }
    }
    for &(x, y) in &pts {
        g.add_node(x, y);
    }
    let n = pts.len();
    let d = |i: usize, j: usize| (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1);
    for i in 0..n {
        for j in i + 1..n {
            let dij = d(i, j);
            let blocked = (0..n)
                .filter(|&k| k != i && k != j)
                .any(|k| d(i, k).max(d(j, k)) < dij);
            if !blocked {
                g.add_edge(i, j, vec![pts[i], pts[j]]);
            }
        }
    }
    g
}

/// Stroke every edge of a graph into a fresh mask.
pub fn rasterize_graph(g: &SpatialGraph, h: usize, w: usize, width: u32) -> Raster {
    let mut mask = Raster::new(h, w, 1);
    for (_, e) in g.edges() {
        draw_polyline(&mut mask, &e.polyline, width);
    }
    mask
}

/// Render one tile: imagery showing the true roads, the exact mask, and a
/// degraded mask drawn with per-segment dropout, width jitter, and a
/// centerline shift. With `NoiseSpec::zero` both masks are identical.
pub fn render_tile(
    g: &SpatialGraph,
    h: usize,
    w: usize,
    road_width: u32,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> (Raster, Raster, Raster) {
    let clean = rasterize_graph(g, h, w, road_width);

    let mut pseudo = Raster::new(h, w, 1);
    for (_, e) in g.edges() {
        if rng.gen::<f64>() < noise.dropout {
            continue;
        }
        let dw = rng.gen_range(-noise.jitter_px..=noise.jitter_px);
        let width = (road_width as f64 + dw).round().max(1.0) as u32;
        let theta = rng.gen_range(0.0..TAU);
        let (dx, dy) = (noise.offset_px * theta.cos(), noise.offset_px * theta.sin());
        let shifted: Vec<(f64, f64)> = e.polyline.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        draw_polyline(&mut pseudo, &shifted, width);
    }

    let mut image = Raster::new(h, w, 3);
    let phase = rng.gen_range(0.0..TAU);
    let road_base = rng.gen_range(115.0..=140.0);
    for r in 0..h {
        for c in 0..w {
            let v = if is_foreground(clean.get(r, c, 0)) {
                road_base + rng.gen_range(-10.0..=10.0)
            } else {
                60.0 + 25.0 * (r as f64 / 9.0 + c as f64 / 13.0 + phase).sin()
                    + rng.gen_range(-10.0..=10.0)
            };
            image.set(r, c, 0, v.clamp(0.0, 255.0) as u8);
            image.set(r, c, 1, (v * 0.95).clamp(0.0, 255.0) as u8);
            image.set(r, c, 2, (v * 0.88).clamp(0.0, 255.0) as u8);
        }
    }
    (image, clean, pseudo)
}

/// Generate `count` tiles into `dir` and write two manifests, `clean.tsv`
/// and `pseudo.tsv`, differing only in which mask column they reference.
/// Tiles are reproducible from (seed, index) alone.
pub fn generate_corpus(
    dir: &Path,
    count: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(Manifest, Manifest), SynthError> {
    cfg.noise.validate()?;
    std::fs::create_dir_all(dir)?;
    let (h, w) = cfg.size;
    let margin = cfg.road_width as f64 * 1.5 + 2.0;
    let mut clean_manifest = Manifest::default();
    let mut pseudo_manifest = Manifest::default();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let g = random_road_graph(&mut rng, h, w, cfg.nodes, margin, cfg.min_sep);
        let (image, clean, pseudo) = render_tile(&g, h, w, cfg.road_width, &cfg.noise, &mut rng);

        let stem = format!("tile_{i:04}");
        write_image(&dir.join(format!("{stem}.ppm")), &image)?;
        write_image(&dir.join(format!("{stem}_clean.pgm")), &clean)?;
        write_image(&dir.join(format!("{stem}_pseudo.pgm")), &pseudo)?;
        write_graph(&g, &dir.join(format!("{stem}_graph.json")))?;
        // tiles sit side by side in world space
        let gt = GeoTransform::new(1.0, 0.0, (i * w) as f64, 0.0, 1.0, 0.0);
        write_world_file(&gt, &dir.join(format!("{stem}.wld")))?;

        let record = |mask: String| ManifestRecord {
            image: format!("{stem}.ppm").into(),
            mask: mask.into(),
            graph: Some(format!("{stem}_graph.json").into()),
            world: Some(format!("{stem}.wld").into()),
        };
        clean_manifest.records.push(record(format!("{stem}_clean.pgm")));
        pseudo_manifest.records.push(record(format!("{stem}_pseudo.pgm")));
    }
    clean_manifest.write(&dir.join("clean.tsv"))?;
    pseudo_manifest.write(&dir.join("pseudo.tsv"))?;
    Ok((clean_manifest, pseudo_manifest))
}
