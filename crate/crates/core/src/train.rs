//! Adam training loop with poly and reduce-on-plateau schedules, plus the
//! two-stage pretrain-then-finetune orchestration and the training-set
//! fraction study.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::mask_to_graph;
use crate::losses::{sigmoid, Loss};
use crate::metrics::{self, apls, threshold, APLS_BUFFER, APLS_SPACING};
use crate::nn::{build_model, load_checkpoint, CheckpointError, Model, ModelConfig, NnError, Tensor};
use crate::raster::{is_foreground, MaskPair, Raster};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Skeleton cleanup settings used when scoring predictions as graphs.
pub const EVAL_SPUR_PX: f64 = 8.0;
pub const EVAL_SIMPLIFY_TOL: f64 = 2.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint does not match the training config: {0}")]
    CheckpointMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_poly_power() -> f64 {
    0.9
}

fn default_plateau_factor() -> f64 {
    0.2
}

fn default_plateau_patience() -> usize {
    3
}

fn default_plateau_max_reductions() -> usize {
    3
}

/// Learning-rate schedule. Poly decays every iteration; plateau watches the
/// per-epoch training loss and cuts the rate when it stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Poly {
        #[serde(default = "default_poly_power")]
        power: f64,
    },
    Plateau {
        #[serde(default = "default_plateau_factor")]
        factor: f64,
        #[serde(default = "default_plateau_patience")]
        patience: usize,
        #[serde(default = "default_plateau_max_reductions")]
        max_reductions: usize,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Poly {
            power: default_poly_power(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub loss: Loss,
    pub seed: u64,
    /// 1 trains from the given weights as-is; 2 additionally requires
    /// `init_checkpoint` and restarts the schedule from iteration zero.
    pub stage: u8,
    pub init_checkpoint: Option<PathBuf>,
    /// Random flips and quarter turns, applied identically to image and mask.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            base_lr: 2e-4,
            batch_size: 4,
            epochs: 90,
            schedule: Schedule::default(),
            loss: Loss::default(),
            seed: 0,
            stage: 1,
            init_checkpoint: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Boundary check for configs arriving from files or flags. The loop
    /// itself does not call this, so degenerate settings (lr 0, zero epochs)
    /// stay expressible in tests.
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if !(self.base_lr > 0.0) {
            return Err(TrainError::Domain(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Domain("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Domain("batch_size must be positive".into()));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(TrainError::Domain(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if self.stage == 2 && self.init_checkpoint.is_none() {
            return Err(TrainError::Domain(
                "stage 2 fine-tunes pretrained weights and needs init_checkpoint".into(),
            ));
        }
        match self.schedule {
            Schedule::Poly { power } => {
                if !(power > 0.0) {
                    return Err(TrainError::Domain(format!(
                        "poly power must be positive, got {power}"
                    )));
                }
            }
            Schedule::Plateau { factor, .. } => {
                if !(factor > 0.0 && factor < 1.0) {
                    return Err(TrainError::Domain(format!(
                        "plateau factor must lie in (0, 1), got {factor}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// base_lr · (1 − iter/max_iter)^power, evaluated once per iteration.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64, TrainError> {
    if max_iter == 0 {
        return Err(TrainError::Domain("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(TrainError::Domain(format!(
            "iteration {iter} is beyond the schedule horizon {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Adam moments, one pair of f64 buffers per parameter tensor. Non-trainable
/// parameters get empty buffers and are never touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model<f32>) -> Self {
        let sizes: Vec<usize> = model
            .params()
            .iter()
            .map(|p| if p.trainable { p.value.numel() } else { 0 })
            .collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Bias-corrected Adam update of one value slice. `t` counts completed steps
/// including this one, so the first call passes 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    values: &mut [f32],
    grads: &[f32],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    let n = values.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "values {n}, grads {}, m {}, v {}",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..n {
        let g = grads[i] as f64;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        values[i] = (values[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
    }
    Ok(())
}

/// One optimizer step over every trainable parameter. A parameter with no
/// accumulated gradient is treated as having gradient zero.
pub fn adam_step(
    model: &mut Model<f32>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if state.m.len() != model.params().len() {
        return Err(TrainError::ShapeMismatch(format!(
            "optimizer state covers {} parameters, model has {}",
            state.m.len(),
            model.params().len()
        )));
    }
    state.step += 1;
    let t = state.step;
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grads: Vec<f32> = match p.value.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.value.numel()],
        };
        adam_update(
            p.value.data_mut(),
            &grads,
            &mut state.m[i],
            &mut state.v[i],
            t,
            lr,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-iteration losses.
    pub loss: f64,
    /// Rate used on the epoch's final iteration.
    pub lr: f64,
    pub miou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    /// Wall time stays out of the CSV so identical runs write identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr,miou\n");
        for r in &self.records {
            let miou = r.miou.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.lr, miou);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// One sample in network layout: planar CHW image in [0,1], HW mask in {0,1}.
struct Sample {
    image: Vec<f32>,
    mask: Vec<f32>,
}

fn prepare(dataset: &[MaskPair], cfg: &ModelConfig) -> Result<(Vec<Sample>, usize, usize), TrainError> {
    let h = dataset[0].image.height;
    let w = dataset[0].image.width;
    let c = cfg.in_channels;
    let mut samples = Vec::with_capacity(dataset.len());
    for pair in dataset {
        if pair.image.height != h || pair.image.width != w {
            return Err(TrainError::ShapeMismatch(format!(
                "tiles must share one size, saw {}x{} and {}x{}",
                h, w, pair.image.height, pair.image.width
            )));
        }
        if pair.image.channels != c {
            return Err(TrainError::ShapeMismatch(format!(
                "model expects {c}-channel input, image has {}",
                pair.image.channels
            )));
        }
        let mut image = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for r in 0..h {
                for q in 0..w {
                    image[(ch * h + r) * w + q] = pair.image.get(r, q, ch) as f32 / 255.0;
                }
            }
        }
        let mut mask = vec![0.0f32; h * w];
        for r in 0..h {
            for q in 0..w {
                mask[r * w + q] = if is_foreground(pair.mask.get(r, q, 0)) {
                    1.0
                } else {
                    0.0
                };
            }
        }
        samples.push(Sample { image, mask });
    }
    Ok((samples, h, w))
}

/// Resample one planar image under a dihedral symmetry. Bit 2 transposes
/// (square inputs only), bit 1 flips rows, bit 0 flips columns.
fn dihedral(src: &[f32], channels: usize, h: usize, w: usize, k: u8) -> Vec<f32> {
    let transpose = k & 4 != 0;
    debug_assert!(!transpose || h == w);
    let mut out = vec![0.0f32; src.len()];
    for c in 0..channels {
        for r in 0..h {
            for q in 0..w {
                let (mut sr, mut sq) = if transpose { (q, r) } else { (r, q) };
                if k & 2 != 0 {
                    sr = h - 1 - sr;
                }
                if k & 1 != 0 {
                    sq = w - 1 - sq;
                }
                out[(c * h + r) * w + q] = src[(c * h + sr) * w + sq];
            }
        }
    }
    out
}

fn assemble(
    samples: &[Sample],
    chunk: &[usize],
    c: usize,
    h: usize,
    w: usize,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Tensor<f32>) {
    let b = chunk.len();
    let mut xs = Vec::with_capacity(b * c * h * w);
    let mut ys = Vec::with_capacity(b * h * w);
    for &i in chunk {
        let s = &samples[i];
        if augment {
            // Quarter turns need square tiles; otherwise only flips apply.
            let k = if h == w {
                rng.gen_range(0..8u8)
            } else {
                rng.gen_range(0..4u8)
            };
            xs.extend_from_slice(&dihedral(&s.image, c, h, w, k));
            ys.extend_from_slice(&dihedral(&s.mask, 1, h, w, k));
        } else {
            xs.extend_from_slice(&s.image);
            ys.extend_from_slice(&s.mask);
        }
    }
    (
        Tensor::from_vec([b, c, h, w], xs),
        Tensor::from_vec([b, 1, h, w], ys),
    )
}

fn image_tensor(image: &Raster) -> Tensor<f32> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            for q in 0..w {
                data[(ch * h + r) * w + q] = image.get(r, q, ch) as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec([1, c, h, w], data)
}

/// Foreground probabilities for one tile, shape [1, 1, h, w].
pub fn predict_probs(model: &Model<f32>, image: &Raster) -> Result<Tensor<f32>, TrainError> {
    let logits = model.forward_eval(&image_tensor(image))?;
    Ok(sigmoid(&logits))
}

/// Predicted foreground mask for one tile, thresholded at 0.5.
pub fn predict_mask(model: &Model<f32>, image: &Raster) -> Result<Raster, TrainError> {
    let probs = predict_probs(model, image)?;
    let mut pred = threshold(&probs, 0.5);
    pred.geo = image.geo.clone();
    Ok(pred)
}

/// Mean per-tile IoU of thresholded predictions.
pub fn evaluate_miou(model: &Model<f32>, pairs: &[MaskPair]) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for pair in pairs {
        let pred = predict_mask(model, &pair.image)?;
        sum += metrics::iou(&pred, &pair.mask)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean per-tile APLS after converting predicted and reference masks to
/// centerline graphs.
pub fn evaluate_apls(model: &Model<f32>, pairs: &[MaskPair]) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut sum = 0.0;
    for pair in pairs {
        let pred = predict_mask(model, &pair.image)?;
        let gt = mask_to_graph(&pair.mask, EVAL_SPUR_PX, EVAL_SIMPLIFY_TOL);
        let got = mask_to_graph(&pred, EVAL_SPUR_PX, EVAL_SIMPLIFY_TOL);
        sum += apls(&gt, &got, APLS_SPACING, APLS_BUFFER).score;
    }
    Ok(sum / pairs.len() as f64)
}

/// Run one training stage. `cfg.init_checkpoint`, when set, replaces the
/// incoming weights before the first iteration; the schedule always starts
/// from iteration zero. With an eval set the weights returned are those of
/// the best-mIoU epoch, otherwise the final ones.
pub fn train_stage(
    dataset: &[MaskPair],
    cfg: &TrainConfig,
    mut model: Model<f32>,
    eval_set: Option<&[MaskPair]>,
) -> Result<(Model<f32>, RunLog), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.cfg != cfg.model {
        return Err(TrainError::Domain(
            "model was built from a different config than the training config".into(),
        ));
    }
    if let Some(path) = &cfg.init_checkpoint {
        let loaded = load_checkpoint(path)?;
        if loaded.cfg != cfg.model {
            return Err(TrainError::CheckpointMismatch(format!(
                "{} holds a different model config",
                path.display()
            )));
        }
        model = loaded;
    }
    let (samples, h, w) = prepare(dataset, &cfg.model)?;
    cfg.model.validate_input(h, w)?;

    let n = samples.len();
    let batch = cfg.batch_size.max(1);
    let iters_per_epoch = n.div_ceil(batch);
    let max_iter = cfg.epochs * iters_per_epoch;
    let c = cfg.model.in_channels;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut iter = 0usize;

    // Plateau bookkeeping; unused under poly.
    let mut lr_current = cfg.base_lr;
    let mut best_loss = f64::INFINITY;
    let mut stall = 0usize;
    let mut reductions = 0usize;

    let mut best_miou = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<f32>> = None;
    let mut log = RunLog::default();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut last_lr = lr_current;
        for chunk in order.chunks(batch) {
            let (x, y) = assemble(&samples, chunk, c, h, w, cfg.augment, &mut rng);
            let lr = match cfg.schedule {
                Schedule::Poly { power } => poly_lr(cfg.base_lr, iter, max_iter, power)?,
                Schedule::Plateau { .. } => lr_current,
            };
            last_lr = lr;
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, dz) = cfg.loss.on_logits(&logits, &y);
            model.zero_grads();
            model.backward(&cache, &dz);
            model.update_running(&cache);
            adam_step(&mut model, &mut state, lr)?;
            loss_sum += loss as f64;
            iter += 1;
        }
        let mean_loss = loss_sum / iters_per_epoch as f64;
        if let Schedule::Plateau {
            factor,
            patience,
            max_reductions,
        } = cfg.schedule
        {
            if mean_loss < best_loss - 1e-12 {
                best_loss = mean_loss;
                stall = 0;
            } else {
                stall += 1;
                if stall >= patience && reductions < max_reductions {
                    lr_current *= factor;
                    reductions += 1;
                    stall = 0;
                }
            }
        }
        let miou = match eval_set {
            Some(pairs) => Some(evaluate_miou(&model, pairs)?),
            None => None,
        };
        if let Some(m) = miou {
            if m > best_miou {
                best_miou = m;
                best_params = Some(model.flatten_params());
            }
        }
        log.records.push(EpochRecord {
            epoch,
            loss: mean_loss,
            lr: last_lr,
            miou,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    if let Some(p) = best_params {
        model.unflatten_params(&p);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionRow {
    pub fraction: f64,
    pub scratch_miou: f64,
    pub scratch_apls: f64,
    pub transfer_miou: f64,
    pub transfer_apls: f64,
}

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.01, 0.05, 0.10, 0.25, 0.5, 1.0];

pub fn fractions_csv(rows: &[FractionRow]) -> String {
    let mut out = String::from("fraction,scratch_miou,scratch_apls,transfer_miou,transfer_apls\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.fraction, r.scratch_miou, r.scratch_apls, r.transfer_miou, r.transfer_apls
        );
    }
    out
}

/// Small-data study: for each fraction, train from scratch and from the
/// pretrained checkpoint on the same seeded subset, then score both on the
/// held-out set. Subsets are prefixes of one shuffle, so smaller fractions
/// nest inside larger ones.
pub fn fraction_protocol(
    train_set: &[MaskPair],
    eval_set: &[MaskPair],
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<FractionRow>, TrainError> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let ckpt = cfg.init_checkpoint.clone().ok_or_else(|| {
        TrainError::Domain("fraction protocol needs init_checkpoint for its transfer arm".into())
    })?;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(TrainError::Domain(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        let subset: Vec<MaskPair> = order[..k].iter().map(|&i| train_set[i].clone()).collect();

        let mut scratch_cfg = cfg.clone();
        scratch_cfg.stage = 1;
        scratch_cfg.init_checkpoint = None;
        let model: Model<f32> = build_model(&cfg.model, cfg.seed)?;
        let (scratch, _) = train_stage(&subset, &scratch_cfg, model, None)?;

        let mut transfer_cfg = cfg.clone();
        transfer_cfg.stage = 2;
        transfer_cfg.init_checkpoint = Some(ckpt.clone());
        let model: Model<f32> = build_model(&cfg.model, cfg.seed)?;
        let (transfer, _) = train_stage(&subset, &transfer_cfg, model, None)?;

        rows.push(FractionRow {
            fraction,
            scratch_miou: evaluate_miou(&scratch, eval_set)?,
            scratch_apls: evaluate_apls(&scratch, eval_set)?,
            transfer_miou: evaluate_miou(&transfer, eval_set)?,
            transfer_apls: evaluate_apls(&transfer, eval_set)?,
        });
    }
    Ok(rows)
}
