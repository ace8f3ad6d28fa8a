//! Command-line frontend. Every subcommand is deterministic given its flags
//! and seed; exit codes are 0 on success, 1 for internal failures, 2 for
//! usage or input problems.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geoseg::geo::{read_world_file, write_world_file};
use geoseg::graph::{mask_to_graph, read_graph};
use geoseg::manifest::Manifest;
use geoseg::metrics::{apls, building_f1, iou, threshold, APLS_BUFFER, APLS_SPACING};
use geoseg::nn::{
    build_model, check_layers, check_model, load_checkpoint, save_checkpoint, Model, LAYER_TOL,
    MODEL_TOL,
};
use geoseg::raster::{rasterize_layer, write_image, MaskPair, Raster, WidthTable};
use geoseg::synth::{generate_corpus, NoiseSpec, SynthConfig};
use geoseg::train::{
    fraction_protocol, fractions_csv, poly_lr, predict_mask, predict_probs, train_stage,
    TrainConfig, TrainError, DEFAULT_FRACTIONS, EVAL_SIMPLIFY_TOL, EVAL_SPUR_PX,
};
use geoseg::vector::{clip_to_tile, parse_geojson};

struct Failure {
    code: u8,
    msg: String,
}

fn input(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        msg: e.to_string(),
    }
}

fn internal(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        msg: e.to_string(),
    }
}

/// Input-shaped training failures keep exit code 2; only mid-run numerical
/// machinery counts as internal.
fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Model(_) | TrainError::Metrics(_) => internal(e),
        _ => input(e),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "geoseg",
    version,
    about = "Road and building segmentation: synthetic corpora, vector rasterization, training, prediction, and pixel/graph/instance evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize GeoJSON roads and buildings into a binary mask
    Rasterize {
        /// GeoJSON FeatureCollection with roads and building footprints
        #[arg(long)]
        vectors: PathBuf,
        /// World file fixing the pixel grid in geographic coordinates
        #[arg(long)]
        world: PathBuf,
        /// Output size as HxW, e.g. 512x512
        #[arg(long)]
        size: String,
        /// JSON file mapping road class to stroke width
        #[arg(long)]
        widths: Option<PathBuf>,
        /// Output mask (PGM); a .wld sidecar is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic road corpus with clean and degraded masks
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Degradation spec, e.g. jitter=2,dropout=0.1,offset=1.5
        #[arg(long, default_value = "")]
        noise: String,
        #[arg(long, default_value = "256x256")]
        size: String,
        /// Road junction/endpoint count per tile
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        road_width: u32,
        /// Minimum distance between junctions
        #[arg(long, default_value_t = 24.0)]
        min_sep: f64,
    },
    /// Train one stage from a manifest and a JSON config
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training config (JSON); relative init_checkpoint paths resolve
        /// against the config file's directory
        #[arg(long)]
        config: PathBuf,
        /// Held-out manifest; enables per-epoch scoring and best-epoch weights
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Per-epoch CSV log
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write probability rasters and thresholded masks for a manifest
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Per-image IoU of thresholded predictions
    EvalPixel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Path-length similarity of predicted road graphs
    EvalApls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Control node spacing along edges
        #[arg(long, default_value_t = APLS_SPACING)]
        spacing: f64,
        /// Snap radius for matching nodes across graphs
        #[arg(long, default_value_t = APLS_BUFFER)]
        buffer: f64,
        /// Skeleton spurs shorter than this are pruned
        #[arg(long, default_value_t = EVAL_SPUR_PX)]
        spur: f64,
        /// Polyline simplification tolerance
        #[arg(long, default_value_t = EVAL_SIMPLIFY_TOL)]
        simplify: f64,
    },
    /// Instance precision/recall/F1 against reference masks
    EvalBuildings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Minimum IoU for an instance match
        #[arg(long, default_value_t = 0.5)]
        iou_thresh: f64,
    },
    /// Certify analytic gradients against finite differences
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the poly learning-rate schedule as CSV
    LrDump {
        #[arg(long, default_value_t = 2e-4)]
        base: f64,
        /// Total iterations; the table has max+1 rows
        #[arg(long)]
        max: usize,
        #[arg(long, default_value_t = 0.9)]
        power: f64,
    },
    /// Scratch vs transfer study across training-set fractions
    Fractions {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        eval_manifest: PathBuf,
        /// Training config (JSON); init_checkpoint supplies the transfer arm
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated fractions, e.g. 0.05,0.25,1.0
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let parse = |t: &str| -> Option<usize> {
        let v = t.trim().parse().ok()?;
        (v > 0).then_some(v)
    };
    s.split_once(['x', 'X'])
        .and_then(|(h, w)| Some((parse(h)?, parse(w)?)))
        .ok_or_else(|| input(format!("size must be HxW with positive extents, got {s:?}")))
}

fn manifest_pairs(path: &Path) -> CliResult<(Manifest, Vec<MaskPair>, PathBuf)> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m = Manifest::read(path).map_err(input)?;
    let pairs = m.load_pairs(&base).map_err(input)?;
    Ok((m, pairs, base))
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(input)?;
    let mut cfg: TrainConfig = serde_json::from_str(&text).map_err(input)?;
    cfg.validate().map_err(input)?;
    if let Some(p) = &cfg.init_checkpoint {
        if p.is_relative() {
            cfg.init_checkpoint = Some(path.parent().unwrap_or(Path::new(".")).join(p));
        }
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    load_checkpoint(path).map_err(input)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> CliResult {
    match out {
        Some(p) => std::fs::write(p, text).map_err(input)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn image_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Rows of (image id, metric values) under a header, closed by a column-mean
/// row.
fn metric_csv(header: &str, rows: &[(String, Vec<f64>)]) -> String {
    let cols = header.split(',').count() - 1;
    let mut out = String::from(header);
    out.push('\n');
    let mut sums = vec![0.0f64; cols];
    for (id, vals) in rows {
        let _ = write!(out, "{id}");
        for (i, v) in vals.iter().enumerate() {
            let _ = write!(out, ",{v}");
            sums[i] += v;
        }
        out.push('\n');
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        out.push_str("mean");
        for s in &sums {
            let _ = write!(out, ",{}", s / n);
        }
        out.push('\n');
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Rasterize {
            vectors,
            world,
            size,
            widths,
            out,
        } => {
            let (h, w) = parse_size(&size)?;
            let text = std::fs::read_to_string(&vectors).map_err(input)?;
            let report = parse_geojson(&text).map_err(input)?;
            if report.ignored > 0 {
                eprintln!("ignored {} unsupported features", report.ignored);
            }
            let gt = read_world_file(&world).map_err(input)?;
            let table: WidthTable = match &widths {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(input)?)
                    .map_err(input)?,
                None => WidthTable::default(),
            };
            let margin = table
                .widths
                .values()
                .copied()
                .max()
                .unwrap_or(0)
                .max(table.default_width) as f64;
            let clipped = clip_to_tile(&report.layer, &gt, h, w, margin).map_err(input)?;
            let mask = rasterize_layer(&clipped, &gt, h, w, &table).map_err(internal)?;
            write_image(&out, &mask).map_err(input)?;
            write_world_file(&gt, &out.with_extension("wld")).map_err(input)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Synth {
            out,
            count,
            seed,
            noise,
            size,
            nodes,
            road_width,
            min_sep,
        } => {
            let (h, w) = parse_size(&size)?;
            let noise: NoiseSpec = noise.parse().map_err(input)?;
            let cfg = SynthConfig {
                size: (h, w),
                nodes,
                road_width,
                min_sep,
                noise,
            };
            let (clean, _) = generate_corpus(&out, count, seed, &cfg).map_err(input)?;
            println!("{} tiles in {}", clean.records.len(), out.display());
            println!("clean manifest: {}", out.join("clean.tsv").display());
            println!("pseudo manifest: {}", out.join("pseudo.tsv").display());
            Ok(())
        }
        Cmd::Train {
            manifest,
            config,
            eval,
            checkpoint_out,
            log,
        } => {
            let cfg = read_config(&config)?;
            let (_, pairs, _) = manifest_pairs(&manifest)?;
            if pairs.is_empty() {
                return Err(input("training manifest has no records"));
            }
            let eval_pairs = match &eval {
                Some(p) => {
                    let (_, pairs, _) = manifest_pairs(p)?;
                    if pairs.is_empty() {
                        return Err(input("eval manifest has no records"));
                    }
                    Some(pairs)
                }
                None => None,
            };
            let model = build_model(&cfg.model, cfg.seed).map_err(internal)?;
            let (model, log_data) =
                train_stage(&pairs, &cfg, model, eval_pairs.as_deref()).map_err(train_failure)?;
            save_checkpoint(&model, &checkpoint_out).map_err(input)?;
            if let Some(p) = &log {
                log_data.write_csv(p).map_err(input)?;
            }
            if let Some(last) = log_data.records.last() {
                match last.miou {
                    Some(m) => println!(
                        "trained {} epochs; final loss {:.6}, miou {:.4}",
                        log_data.records.len(),
                        last.loss,
                        m
                    ),
                    None => println!(
                        "trained {} epochs; final loss {:.6}",
                        log_data.records.len(),
                        last.loss
                    ),
                }
            }
            println!("checkpoint: {}", checkpoint_out.display());
            Ok(())
        }
        Cmd::Predict {
            checkpoint,
            manifest,
            out_dir,
            threshold: t,
        } => {
            let model = load_model(&checkpoint)?;
            let (m, pairs, _) = manifest_pairs(&manifest)?;
            std::fs::create_dir_all(&out_dir).map_err(input)?;
            for (record, pair) in m.records.iter().zip(&pairs) {
                let stem = image_stem(&record.image);
                let probs = predict_probs(&model, &pair.image).map_err(internal)?;
                let [_, _, h, w] = probs.shape();
                let mut prob_raster = Raster::new(h, w, 1);
                for (dst, &p) in prob_raster.data.iter_mut().zip(probs.data().iter()) {
                    *dst = (p * 255.0).round().clamp(0.0, 255.0) as u8;
                }
                prob_raster.geo = pair.image.geo.clone();
                let mut pred = threshold(&probs, t);
                pred.geo = pair.image.geo.clone();
                write_image(&out_dir.join(format!("{stem}_prob.pgm")), &prob_raster)
                    .map_err(input)?;
                write_image(&out_dir.join(format!("{stem}_pred.pgm")), &pred).map_err(input)?;
            }
            println!("wrote {} predictions to {}", pairs.len(), out_dir.display());
            Ok(())
        }
        Cmd::EvalPixel {
            checkpoint,
            manifest,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let (m, pairs, _) = manifest_pairs(&manifest)?;
            let mut rows = Vec::with_capacity(pairs.len());
            for (record, pair) in m.records.iter().zip(&pairs) {
                let pred = predict_mask(&model, &pair.image).map_err(internal)?;
                let v = iou(&pred, &pair.mask).map_err(internal)?;
                rows.push((image_stem(&record.image), vec![v]));
            }
            write_or_print(&out, &metric_csv("image_id,iou", &rows))
        }
        Cmd::EvalApls {
            checkpoint,
            manifest,
            out,
            spacing,
            buffer,
            spur,
            simplify,
        } => {
            let model = load_model(&checkpoint)?;
            let (m, pairs, base) = manifest_pairs(&manifest)?;
            let mut rows = Vec::with_capacity(pairs.len());
            for (record, pair) in m.records.iter().zip(&pairs) {
                let gt = match &record.graph {
                    Some(p) => read_graph(&base.join(p)).map_err(input)?,
                    None => mask_to_graph(&pair.mask, spur, simplify),
                };
                let pred_mask = predict_mask(&model, &pair.image).map_err(internal)?;
                let pred = mask_to_graph(&pred_mask, spur, simplify);
                let score = apls(&gt, &pred, spacing, buffer).score;
                rows.push((image_stem(&record.image), vec![score]));
            }
            write_or_print(&out, &metric_csv("image_id,apls", &rows))
        }
        Cmd::EvalBuildings {
            checkpoint,
            manifest,
            out,
            iou_thresh,
        } => {
            let model = load_model(&checkpoint)?;
            let (m, pairs, _) = manifest_pairs(&manifest)?;
            let mut rows = Vec::with_capacity(pairs.len());
            for (record, pair) in m.records.iter().zip(&pairs) {
                let pred = predict_mask(&model, &pair.image).map_err(internal)?;
                let rep = building_f1(&pred, &pair.mask, iou_thresh).map_err(internal)?;
                rows.push((
                    image_stem(&record.image),
                    vec![rep.precision, rep.recall, rep.f1],
                ));
            }
            write_or_print(&out, &metric_csv("image_id,precision,recall,f1", &rows))
        }
        Cmd::GradCheck { seed } => {
            let mut ok = true;
            println!("check,max_rel_err,tolerance,status");
            for c in check_layers(seed) {
                let pass = c.passed();
                ok &= pass;
                println!(
                    "{},{:.3e},{:.0e},{}",
                    c.name,
                    c.max_rel_err,
                    LAYER_TOL,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            let model_err = check_model(seed);
            let pass = model_err < MODEL_TOL;
            ok &= pass;
            println!(
                "model_end_to_end,{:.3e},{:.0e},{}",
                model_err,
                MODEL_TOL,
                if pass { "ok" } else { "FAIL" }
            );
            if ok {
                Ok(())
            } else {
                Err(internal("gradient check exceeded tolerance"))
            }
        }
        Cmd::LrDump { base, max, power } => {
            println!("iter,lr");
            for i in 0..=max {
                let lr = poly_lr(base, i, max, power).map_err(input)?;
                println!("{i},{lr}");
            }
            Ok(())
        }
        Cmd::Fractions {
            train_manifest,
            eval_manifest,
            config,
            fractions,
            out,
        } => {
            let cfg = read_config(&config)?;
            let fracs: Vec<f64> = match &fractions {
                Some(s) => s
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| input(format!("bad fraction list: {e}")))?,
                None => DEFAULT_FRACTIONS.to_vec(),
            };
            let (_, train_pairs, _) = manifest_pairs(&train_manifest)?;
            let (_, eval_pairs, _) = manifest_pairs(&eval_manifest)?;
            let rows =
                fraction_protocol(&train_pairs, &eval_pairs, &fracs, &cfg).map_err(train_failure)?;
            write_or_print(&out, &fractions_csv(&rows))
        }
    }
}
