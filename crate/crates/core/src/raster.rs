//! Raster containers, PGM/PPM I/O, and vector-to-mask rasterization.
//!
//! Continuous pixel coordinates put integer positions at pixel centers:
//! point `(x, y)` lies on the center of pixel `(row=y, col=x)` when both are
//! integral. All drawing uses the pixel-center membership rule, so output is
//! deterministic and checkable against brute-force oracles.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::geo::{GeoError, GeoTransform};
use crate::vector::VectorLayer;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("polygon ring has fewer than 3 distinct vertices")]
    DegeneratePolygon,
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptHeader(String),
    #[error("image and mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("geotransform error: {0}")]
    Geo(#[from] GeoError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Foreground threshold for binary masks stored as {0, 255}.
pub fn is_foreground(v: u8) -> bool {
    v > 127
}

/// Row-major 8-bit image with 1 (mask/gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub geo: Option<GeoTransform>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert!(height > 0 && width > 0, "dimensions must be positive");
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
            geo: None,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        let i = self.idx(row, col, ch);
        self.data[i] = v;
    }

    /// Count of foreground pixels; only meaningful for 1-channel masks.
    pub fn foreground_count(&self) -> usize {
        debug_assert_eq!(self.channels, 1);
        self.data.iter().filter(|&&v| is_foreground(v)).count()
    }

    /// True when every sample is 0 or 255.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0 || v == 255)
    }
}

/// An input image with its aligned binary training mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub image: Raster,
    pub mask: Raster,
}

impl MaskPair {
    pub fn new(image: Raster, mask: Raster) -> Result<Self, RasterError> {
        if image.height != mask.height || image.width != mask.width {
            return Err(RasterError::DimensionMismatch(
                image.height,
                image.width,
                mask.height,
                mask.width,
            ));
        }
        assert_eq!(image.channels, 3, "image must be 3-channel");
        assert_eq!(mask.channels, 1, "mask must be 1-channel");
        Ok(Self { image, mask })
    }
}

/// Road class to stroke width in pixels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WidthTable {
    pub widths: BTreeMap<String, u32>,
    /// Width for classes not present in the table.
    pub default_width: u32,
}

impl Default for WidthTable {
    fn default() -> Self {
        let widths = BTreeMap::from_iter([
            ("primary".to_string(), 9),
            ("secondary".to_string(), 7),
            ("residential".to_string(), 5),
            ("path".to_string(), 3),
        ]);
        Self {
            widths,
            default_width: 5,
        }
    }
}

impl WidthTable {
    pub fn uniform(width: u32) -> Self {
        Self {
            widths: BTreeMap::new(),
            default_width: width,
        }
    }

    pub fn width_for(&self, class: &str) -> u32 {
        self.widths.get(class).copied().unwrap_or(self.default_width)
    }
}

fn dist_point_segment(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let dx = x2 - x1;
    let dy = y2 - y1;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let cx = x1 + t * dx;
    let cy = y1 + t * dy;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Stroke a polyline onto a 1-channel mask.
///
/// A pixel is set to 255 when its center lies within `width_px / 2`
/// (Euclidean) of any segment; the clamped point-to-segment distance gives
/// round caps and joins for free. Fewer than 2 points is a no-op. Geometry
/// outside the raster is clipped by the bounds scan.
pub fn draw_polyline(mask: &mut Raster, points: &[(f64, f64)], width_px: u32) {
    assert_eq!(mask.channels, 1, "polylines draw on 1-channel masks");
    if points.len() < 2 || width_px == 0 {
        return;
    }
    let radius = width_px as f64 / 2.0;
    let (h, w) = (mask.height as f64, mask.width as f64);
    for seg in points.windows(2) {
        let (x1, y1) = seg[0];
        let (x2, y2) = seg[1];
        // Scan only the segment's dilated bounding box.
        let r_lo = (y1.min(y2) - radius).ceil().clamp(0.0, h - 1.0) as usize;
        let r_hi = (y1.max(y2) + radius).floor().clamp(0.0, h - 1.0) as usize;
        let c_lo = (x1.min(x2) - radius).ceil().clamp(0.0, w - 1.0) as usize;
        let c_hi = (x1.max(x2) + radius).floor().clamp(0.0, w - 1.0) as usize;
        if (y1.max(y2) + radius) < 0.0 || (y1.min(y2) - radius) > h - 1.0 {
            continue;
        }
        if (x1.max(x2) + radius) < 0.0 || (x1.min(x2) - radius) > w - 1.0 {
            continue;
        }
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                if dist_point_segment(c as f64, r as f64, x1, y1, x2, y2) <= radius {
                    mask.set(r, c, 0, 255);
                }
            }
        }
    }
}

fn point_in_ring_even_odd(px: f64, py: f64, ring: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > py) != (yj > py) {
            let x_cross = xi + (py - yi) / (yj - yi) * (xj - xi);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Fill a polygon interior (even-odd rule) onto a 1-channel mask.
///
/// The ring may repeat its first vertex to close explicitly; closure is
/// otherwise implicit. Fewer than 3 distinct vertices is an error.
pub fn fill_polygon(mask: &mut Raster, ring: &[(f64, f64)]) -> Result<(), RasterError> {
    assert_eq!(mask.channels, 1, "polygons fill 1-channel masks");
    let mut verts: Vec<(f64, f64)> = ring.to_vec();
    if verts.len() >= 2 && verts.first() == verts.last() {
        verts.pop();
    }
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &v in &verts {
        if !distinct.contains(&v) {
            distinct.push(v);
        }
    }
    if distinct.len() < 3 {
        return Err(RasterError::DegeneratePolygon);
    }

    let (h, w) = (mask.height as f64, mask.width as f64);
    let ys: Vec<f64> = verts.iter().map(|p| p.1).collect();
    let xs: Vec<f64> = verts.iter().map(|p| p.0).collect();
    let r_lo = ys.iter().cloned().fold(f64::INFINITY, f64::min).ceil().clamp(0.0, h - 1.0) as usize;
    let r_hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor().clamp(0.0, h - 1.0) as usize;
    let c_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min).ceil().clamp(0.0, w - 1.0) as usize;
    let c_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor().clamp(0.0, w - 1.0) as usize;
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            if point_in_ring_even_odd(c as f64, r as f64, &verts) {
                mask.set(r, c, 0, 255);
            }
        }
    }
    Ok(())
}

/// Rasterize a vector layer to a binary mask.
///
/// Roads are stroked at their class width from `width_table`; building
/// rings are filled. Geometry is projected through the inverse of `gt`.
/// Degenerate building rings are skipped rather than fatal: pseudo ground
/// truth tolerates noisy source data.
pub fn rasterize_layer(
    layer: &VectorLayer,
    gt: &GeoTransform,
    h: usize,
    w: usize,
    width_table: &WidthTable,
) -> Result<Raster, RasterError> {
    let mut mask = Raster::new(h, w, 1);
    for road in &layer.roads {
        let pts = project_points(&road.polyline, gt)?;
        draw_polyline(&mut mask, &pts, width_table.width_for(&road.road_class));
    }
    for building in &layer.buildings {
        let ring = project_points(&building.ring, gt)?;
        match fill_polygon(&mut mask, &ring) {
            Ok(()) | Err(RasterError::DegeneratePolygon) => {}
            Err(e) => return Err(e),
        }
    }
    mask.geo = Some(*gt);
    Ok(mask)
}

fn project_points(
    lonlat: &[(f64, f64)],
    gt: &GeoTransform,
) -> Result<Vec<(f64, f64)>, GeoError> {
    lonlat
        .iter()
        .map(|&(lon, lat)| gt.geo_to_pixel(lon, lat).map(|(row, col)| (col, row)))
        .collect()
}

/// Write PGM (P5, 1-channel) or PPM (P6, 3-channel), maxval 255.
pub fn write_image(path: &Path, raster: &Raster) -> Result<(), RasterError> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(RasterError::UnsupportedFormat(format!(
                "{c}-channel rasters have no netpbm encoding"
            )))
        }
    };
    let mut bytes =
        format!("{}\n{} {}\n255\n", magic, raster.width, raster.height).into_bytes();
    bytes.extend_from_slice(&raster.data);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PGM/PPM written by [`write_image`] or any conformant tool.
pub fn read_image(path: &Path) -> Result<Raster, RasterError> {
    let bytes = std::fs::read(path)?;
    decode_netpbm(&bytes)
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Raster, RasterError> {
    let mut pos = 0usize;

    fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, RasterError> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(RasterError::CorruptHeader("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }

    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(RasterError::UnsupportedFormat(format!(
                "magic {other:?} (only binary P5/P6)"
            )))
        }
    };
    let width: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| RasterError::CorruptHeader("width is not a number".into()))?;
    let height: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| RasterError::CorruptHeader("height is not a number".into()))?;
    let maxval: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| RasterError::CorruptHeader("maxval is not a number".into()))?;
    if maxval != 255 {
        return Err(RasterError::UnsupportedFormat(format!(
            "maxval {maxval} (only 255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(RasterError::CorruptHeader("zero dimension".into()));
    }
    // exactly one whitespace byte separates header from samples
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(RasterError::CorruptHeader("missing payload separator".into()));
    }
    pos += 1;
    let need = height * width * channels;
    if bytes.len() - pos < need {
        return Err(RasterError::CorruptHeader(format!(
            "payload has {} bytes, expected {}",
            bytes.len() - pos,
            need
        )));
    }
    Ok(Raster {
        height,
        width,
        channels,
        data: bytes[pos..pos + need].to_vec(),
        geo: None,
    })
}

/// Sidecar world-file path for an image: `<image>.wld`.
pub fn world_file_path(image_path: &Path) -> std::path::PathBuf {
    let mut os = image_path.as_os_str().to_owned();
    os.push(".wld");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::{Building, Road};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn thin_horizontal_line() {
        let mut mask = Raster::new(16, 16, 1);
        draw_polyline(&mut mask, &[(2.0, 5.0), (10.0, 5.0)], 1);
        for r in 0..16 {
            for c in 0..16 {
                let expect = r == 5 && (2..=10).contains(&c);
                assert_eq!(
                    is_foreground(mask.get(r, c, 0)),
                    expect,
                    "pixel ({r},{c})"
                );
            }
        }
    }

    // Independent distance check: full-image scan, no bounding box, distance
    // computed from the explicit closest-point formula.
    fn oracle_stroke(h: usize, w: usize, pts: &[(f64, f64)], width_px: u32) -> Vec<bool> {
        let radius = width_px as f64 / 2.0;
        let mut out = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f64, r as f64);
                'seg: for s in pts.windows(2) {
                    let ((x1, y1), (x2, y2)) = (s[0], s[1]);
                    let (ux, uy) = (x2 - x1, y2 - y1);
                    let l2 = ux * ux + uy * uy;
                    let mut best = f64::INFINITY;
                    // distance to both endpoints and to the infinite line if
                    // the projection falls inside the segment
                    best = best.min(((px - x1).powi(2) + (py - y1).powi(2)).sqrt());
                    best = best.min(((px - x2).powi(2) + (py - y2).powi(2)).sqrt());
                    if l2 > 0.0 {
                        let t = ((px - x1) * ux + (py - y1) * uy) / l2;
                        if (0.0..=1.0).contains(&t) {
                            let d = ((px - (x1 + t * ux)).powi(2)
                                + (py - (y1 + t * uy)).powi(2))
                            .sqrt();
                            best = best.min(d);
                        }
                    }
                    if best <= radius {
                        out[r * w + c] = true;
                        break 'seg;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn wide_line_matches_distance_oracle() {
        let mut mask = Raster::new(16, 16, 1);
        let pts = [(2.0, 5.0), (10.0, 5.0)];
        draw_polyline(&mut mask, &pts, 5);
        let oracle = oracle_stroke(16, 16, &pts, 5);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(
                    is_foreground(mask.get(r, c, 0)),
                    oracle[r * 16 + c],
                    "pixel ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn random_polylines_match_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..100 {
            let h = rng.gen_range(8..24);
            let w = rng.gen_range(8..24);
            let n = rng.gen_range(2..5);
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(-4.0..w as f64 + 4.0),
                        rng.gen_range(-4.0..h as f64 + 4.0),
                    )
                })
                .collect();
            let width = rng.gen_range(1..8);
            let mut mask = Raster::new(h, w, 1);
            draw_polyline(&mut mask, &pts, width);
            let oracle = oracle_stroke(h, w, &pts, width);
            for r in 0..h {
                for c in 0..w {
                    assert_eq!(
                        is_foreground(mask.get(r, c, 0)),
                        oracle[r * w + c],
                        "case {case} pixel ({r},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn single_point_is_noop() {
        let mut mask = Raster::new(8, 8, 1);
        draw_polyline(&mut mask, &[(3.0, 3.0)], 5);
        assert_eq!(mask.foreground_count(), 0);
    }

    #[test]
    fn rectangle_fill() {
        let mut mask = Raster::new(8, 8, 1);
        fill_polygon(
            &mut mask,
            &[(1.5, 1.5), (6.5, 1.5), (6.5, 4.5), (1.5, 4.5)],
        )
        .unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expect = (2..=4).contains(&r) && (2..=6).contains(&c);
                assert_eq!(is_foreground(mask.get(r, c, 0)), expect, "pixel ({r},{c})");
            }
        }
    }

    // Convex containment oracle: inside iff every edge cross product has the
    // same sign. Valid only for convex rings; vertices are irrational enough
    // that no pixel center sits exactly on an edge.
    fn convex_contains(p: (f64, f64), verts: &[(f64, f64)]) -> bool {
        let n = verts.len();
        let mut sign = 0i32;
        for i in 0..n {
            let a = verts[i];
            let b = verts[(i + 1) % n];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            let s = if cross > 0.0 { 1 } else { -1 };
            if sign == 0 {
                sign = s;
            } else if s != sign {
                return false;
            }
        }
        true
    }

    #[test]
    fn random_convex_polygons_match_containment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for case in 0..50 {
            let h = 24;
            let w = 24;
            let cx = rng.gen_range(8.0..16.0) + 0.137;
            let cy = rng.gen_range(8.0..16.0) + 0.291;
            let n = rng.gen_range(3..8);
            // sorted angles around a center give a convex-ish star; radii
            // equal per vertex make it convex
            let base = rng.gen_range(3.0..9.0);
            let mut angles: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            if angles.len() < 3 {
                continue;
            }
            let verts: Vec<(f64, f64)> = angles
                .iter()
                .map(|&t| (cx + base * t.cos(), cy + base * t.sin()))
                .collect();
            let mut mask = Raster::new(h, w, 1);
            fill_polygon(&mut mask, &verts).unwrap();
            for r in 0..h {
                for c in 0..w {
                    assert_eq!(
                        is_foreground(mask.get(r, c, 0)),
                        convex_contains((c as f64, r as f64), &verts),
                        "case {case} pixel ({r},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn two_vertex_ring_rejected() {
        let mut mask = Raster::new(8, 8, 1);
        assert!(matches!(
            fill_polygon(&mut mask, &[(1.0, 1.0), (5.0, 5.0)]),
            Err(RasterError::DegeneratePolygon)
        ));
        // explicit closure does not add a distinct vertex
        assert!(matches!(
            fill_polygon(&mut mask, &[(1.0, 1.0), (5.0, 5.0), (1.0, 1.0)]),
            Err(RasterError::DegeneratePolygon)
        ));
    }

    fn three_road_layer() -> VectorLayer {
        VectorLayer {
            roads: vec![
                Road {
                    polyline: vec![(2.0, 2.0), (28.0, 4.0)],
                    road_class: "primary".into(),
                },
                Road {
                    polyline: vec![(5.0, 30.0), (20.0, 1.0)],
                    road_class: "path".into(),
                },
                Road {
                    polyline: vec![(0.0, 16.0), (31.0, 16.0), (31.0, 31.0)],
                    road_class: "unmapped_class".into(),
                },
            ],
            buildings: vec![],
        }
    }

    #[test]
    fn layer_rasterization_composes_draws() {
        let gt = GeoTransform::identity();
        let layer = VectorLayer {
            roads: vec![Road {
                polyline: vec![(-4.0, 10.0), (40.0, 10.0)],
                road_class: "secondary".into(),
            }],
            buildings: vec![],
        };
        let table = WidthTable::default();
        let mask = rasterize_layer(&layer, &gt, 32, 32, &table).unwrap();
        // identity gt still applies the half-pixel center offset
        let mut direct = Raster::new(32, 32, 1);
        draw_polyline(&mut direct, &[(-4.5, 9.5), (39.5, 9.5)], 7);
        assert_eq!(mask.data, direct.data);
        assert_eq!(mask.geo, Some(gt));
    }

    #[test]
    fn empty_layer_rasterizes_to_zero() {
        let gt = GeoTransform::identity();
        let mask =
            rasterize_layer(&VectorLayer::default(), &gt, 16, 16, &WidthTable::default()).unwrap();
        assert_eq!(mask.foreground_count(), 0);
    }

    #[test]
    fn layer_equals_union_of_per_feature_masks() {
        let gt = GeoTransform::identity();
        let table = WidthTable::default();
        let layer = three_road_layer();
        let full = rasterize_layer(&layer, &gt, 32, 32, &table).unwrap();
        let mut union = Raster::new(32, 32, 1);
        for road in &layer.roads {
            let single = VectorLayer {
                roads: vec![road.clone()],
                buildings: vec![],
            };
            let m = rasterize_layer(&single, &gt, 32, 32, &table).unwrap();
            for (u, v) in union.data.iter_mut().zip(m.data.iter()) {
                *u = (*u).max(*v);
            }
        }
        assert_eq!(full.data, union.data);
    }

    #[test]
    fn feature_order_does_not_matter() {
        let gt = GeoTransform::identity();
        let table = WidthTable::default();
        let layer = three_road_layer();
        let mut reversed = layer.clone();
        reversed.roads.reverse();
        let a = rasterize_layer(&layer, &gt, 32, 32, &table).unwrap();
        let b = rasterize_layer(&reversed, &gt, 32, 32, &table).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn wider_table_is_superset() {
        let gt = GeoTransform::identity();
        let layer = three_road_layer();
        let narrow = rasterize_layer(&layer, &gt, 32, 32, &WidthTable::uniform(3)).unwrap();
        let wide = rasterize_layer(&layer, &gt, 32, 32, &WidthTable::uniform(7)).unwrap();
        for (n, w) in narrow.data.iter().zip(wide.data.iter()) {
            assert!(w >= n, "widening lost a pixel");
        }
    }

    #[test]
    fn drawing_is_idempotent() {
        let mut once = Raster::new(16, 16, 1);
        let pts = [(1.0, 1.0), (12.0, 9.0), (3.0, 14.0)];
        draw_polyline(&mut once, &pts, 5);
        let mut twice = once.clone();
        draw_polyline(&mut twice, &pts, 5);
        assert_eq!(once.data, twice.data);

        let ring = [(2.5, 2.5), (12.5, 3.5), (9.5, 13.5)];
        let mut f_once = Raster::new(16, 16, 1);
        fill_polygon(&mut f_once, &ring).unwrap();
        let mut f_twice = f_once.clone();
        fill_polygon(&mut f_twice, &ring).unwrap();
        assert_eq!(f_once.data, f_twice.data);
    }

    #[test]
    fn building_fill_via_layer() {
        let gt = GeoTransform::identity();
        let layer = VectorLayer {
            roads: vec![],
            buildings: vec![Building {
                ring: vec![(1.5, 1.5), (6.5, 1.5), (6.5, 4.5), (1.5, 4.5)],
            }],
        };
        let mask = rasterize_layer(&layer, &gt, 8, 8, &WidthTable::default()).unwrap();
        assert_eq!(mask.foreground_count(), 3 * 5);
    }

    #[test]
    fn ppm_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut raster = Raster::new(13, 7, 3);
        rng.fill(&mut raster.data[..]);
        write_image(&path, &raster).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(raster.height, back.height);
        assert_eq!(raster.width, back.width);
        assert_eq!(raster.channels, back.channels);
        assert_eq!(raster.data, back.data);
        // and the re-encoding is byte-identical on disk
        let path2 = dir.path().join("img2.ppm");
        write_image(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mut mask = Raster::new(5, 9, 1);
        draw_polyline(&mut mask, &[(0.0, 2.0), (8.0, 2.0)], 3);
        write_image(&path, &mask).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(mask.data, back.data);
        assert!(back.is_binary());
    }

    #[test]
    fn sixteen_bit_maxval_rejected() {
        let bytes = b"P5\n4 4\n65535\n".to_vec();
        assert!(matches!(
            decode_netpbm(&bytes),
            Err(RasterError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[7u8; 10]); // needs 16
        assert!(matches!(
            decode_netpbm(&bytes),
            Err(RasterError::CorruptHeader(_))
        ));
    }

    #[test]
    fn header_comments_tolerated() {
        let mut bytes = b"P5\n# comment line\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let r = decode_netpbm(&bytes).unwrap();
        assert_eq!((r.height, r.width), (2, 3));
        assert_eq!(r.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn unknown_magic_rejected() {
        assert!(matches!(
            decode_netpbm(b"P3\n2 2\n255\n"),
            Err(RasterError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn mask_pair_dimension_check() {
        let img = Raster::new(8, 8, 3);
        let mask = Raster::new(8, 9, 1);
        assert!(matches!(
            MaskPair::new(img, mask),
            Err(RasterError::DimensionMismatch(..))
        ));
        let img = Raster::new(8, 8, 3);
        let mask = Raster::new(8, 8, 1);
        assert!(MaskPair::new(img, mask).is_ok());
    }
}
