//! The segmentation model: residual encoder, pyramid-pooling center,
//! additive-skip decoder, 1-channel logit head.
//!
//! Layout at scale factor `s` (stage widths double as resolution halves):
//!
//! ```text
//! input (in_channels, H, W)
//!   stem: 3×3 conv → BN → ReLU                     (C₀, H, W)        = e₀
//!   stage s = 1..S: downsample block + identity
//!     blocks (conv-BN-ReLU-conv-BN + skip, ReLU)   (C₀·2ˢ, H/2ˢ)     = eₛ
//!   pyramid pooling over e_S                       (C₀·2ˢ, H/2ˢ)     = f_S
//!   decoder s = S..1: 1×1 conv → BN → ReLU →
//!     4×4/2 transposed conv → BN → ReLU →
//!     1×1 conv → BN → ReLU, then + eₛ₋₁            f_{s−1}
//!   head: 3×3 conv (with bias) → logits            (1, H, W)
//! ```
//!
//! Pyramid pooling: each bin pools e_S to b×b, applies a biased 1×1 conv to
//! C/4 channels, and bilinearly upsamples back; the branches are concatenated
//! with e_S and fused by a biased 3×3 conv back to C channels. Branch and
//! fusion convs carry no normalization, so constant inputs stay constant.
//!
//! Forward in train mode is pure (running statistics update separately);
//! backward accumulates into per-parameter gradient buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_eval, batch_norm_train,
    batch_norm_train_backward, bilinear_upsample, bilinear_upsample_backward, concat_channels,
    conv2d, conv2d_backward, relu, relu_backward, split_channels, transposed_conv2d,
    transposed_conv2d_backward, update_running_stats, BnCache, NnError,
};
use super::tensor::{s, Scalar, Tensor};

fn cfg_err(msg: impl Into<String>) -> NnError {
    NnError::ConfigError(msg.into())
}

/// Architecture hyperparameters. Parameter shapes and counts are a pure
/// function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Stem width C₀; stage `s` has width C₀·2ˢ.
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    /// Number of halving stages S.
    #[serde(default = "default_encoder_stages")]
    pub encoder_stages: usize,
    #[serde(default = "default_blocks_per_stage")]
    pub blocks_per_stage: usize,
    /// Pyramid pooling bin edges; each must divide the deepest feature extent.
    #[serde(default = "default_pp_bins")]
    pub pp_bins: Vec<usize>,
}

fn default_in_channels() -> usize {
    3
}
fn default_base_width() -> usize {
    8
}
fn default_encoder_stages() -> usize {
    3
}
fn default_blocks_per_stage() -> usize {
    2
}
fn default_pp_bins() -> Vec<usize> {
    vec![1, 2, 3, 6]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            base_width: default_base_width(),
            encoder_stages: default_encoder_stages(),
            blocks_per_stage: default_blocks_per_stage(),
            pp_bins: default_pp_bins(),
        }
    }
}

impl ModelConfig {
    /// Stage width at depth `stage` (0 = stem).
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn deepest_width(&self) -> usize {
        self.width(self.encoder_stages)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_channels == 0
            || self.base_width == 0
            || self.encoder_stages == 0
            || self.blocks_per_stage == 0
        {
            return Err(cfg_err("all config fields must be positive"));
        }
        if self.base_width % 2 != 0 {
            return Err(cfg_err("base_width must be even (decoder quarters stage widths)"));
        }
        if self.pp_bins.is_empty() || self.pp_bins.contains(&0) {
            return Err(cfg_err("pp_bins must be non-empty and positive"));
        }
        if self.deepest_width() % 4 != 0 {
            return Err(cfg_err("deepest width must divide by 4 for pyramid branches"));
        }
        Ok(())
    }

    /// Check an input spatial extent against the stage and bin structure.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<(), NnError> {
        self.validate()?;
        let div = 1usize << self.encoder_stages;
        if h % div != 0 || w % div != 0 {
            return Err(cfg_err(format!(
                "input {h}x{w} not divisible by 2^{}",
                self.encoder_stages
            )));
        }
        let (dh, dw) = (h / div, w / div);
        for &b in &self.pp_bins {
            if dh % b != 0 || dw % b != 0 {
                return Err(cfg_err(format!(
                    "deepest feature {dh}x{dw} not divisible into {b} bins"
                )));
            }
        }
        Ok(())
    }
}

/// One named parameter tensor. Running statistics are stored here too but
/// marked non-trainable so the optimizer skips them.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnRef {
    gamma: usize,
    beta: usize,
    rmean: usize,
    rvar: usize,
}

#[derive(Debug, Clone)]
struct BlockArch {
    conv1: ConvRef,
    bn1: BnRef,
    conv2: ConvRef,
    bn2: BnRef,
    down: Option<(ConvRef, BnRef)>,
}

#[derive(Debug, Clone)]
struct DecoderArch {
    conv_in: ConvRef,
    bn_in: BnRef,
    tconv: ConvRef,
    bn_mid: BnRef,
    conv_out: ConvRef,
    bn_out: BnRef,
}

#[derive(Debug, Clone)]
struct PpArch {
    branches: Vec<(usize, ConvRef)>,
    fuse: ConvRef,
}

#[derive(Debug, Clone)]
struct Arch {
    stem_conv: ConvRef,
    stem_bn: BnRef,
    stages: Vec<Vec<BlockArch>>,
    pp: PpArch,
    decoders: Vec<DecoderArch>,
    head: ConvRef,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// The assembled model: config, flat parameter store, layer wiring.
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    params: Vec<Param<T>>,
    arch: Arch,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> usize {
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    /// He-normal kernel: std = √(2 / (c_in·kh·kw)).
    fn he_kernel(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                s(z * std)
            })
            .collect();
        self.push(name, Tensor::from_vec(shape, data), true)
    }

    fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> ConvRef {
        let w = self.he_kernel(format!("{name}.w"), [c_out, c_in, k, k], c_in * k * k);
        let b = bias.then(|| {
            self.push(
                format!("{name}.b"),
                Tensor::zeros([c_out, 1, 1, 1]),
                true,
            )
        });
        ConvRef { w, b, stride, pad }
    }

    /// Transposed conv: kernel layout (c_in, c_out, k, k).
    fn tconv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> ConvRef {
        let w = self.he_kernel(format!("{name}.w"), [c_in, c_out, k, k], c_in * k * k);
        ConvRef {
            w,
            b: None,
            stride,
            pad,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let shape = [c, 1, 1, 1];
        BnRef {
            gamma: self.push(format!("{name}.gamma"), Tensor::full(shape, T::one()), true),
            beta: self.push(format!("{name}.beta"), Tensor::zeros(shape), true),
            rmean: self.push(format!("{name}.rmean"), Tensor::zeros(shape), false),
            rvar: self.push(format!("{name}.rvar"), Tensor::full(shape, T::one()), false),
        }
    }
}

/// Build a freshly initialized model. The same seed and config produce
/// bit-identical parameters.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>, NnError> {
    cfg.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let stem_conv = b.conv("stem.conv", cfg.width(0), cfg.in_channels, 3, 1, 1, false);
    let stem_bn = b.bn("stem.bn", cfg.width(0));

    let mut stages = Vec::new();
    for st in 1..=cfg.encoder_stages {
        let (w_in, w_out) = (cfg.width(st - 1), cfg.width(st));
        let mut blocks = Vec::new();
        for blk in 0..cfg.blocks_per_stage {
            let prefix = format!("enc{st}.b{blk}");
            let first = blk == 0;
            let c_in = if first { w_in } else { w_out };
            let stride = if first { 2 } else { 1 };
            let conv1 = b.conv(&format!("{prefix}.conv1"), w_out, c_in, 3, stride, 1, false);
            let bn1 = b.bn(&format!("{prefix}.bn1"), w_out);
            let conv2 = b.conv(&format!("{prefix}.conv2"), w_out, w_out, 3, 1, 1, false);
            let bn2 = b.bn(&format!("{prefix}.bn2"), w_out);
            let down = first.then(|| {
                (
                    b.conv(&format!("{prefix}.down.conv"), w_out, w_in, 1, 2, 0, false),
                    b.bn(&format!("{prefix}.down.bn"), w_out),
                )
            });
            blocks.push(BlockArch {
                conv1,
                bn1,
                conv2,
                bn2,
                down,
            });
        }
        stages.push(blocks);
    }

    let c = cfg.deepest_width();
    let branch_c = c / 4;
    let branches = cfg
        .pp_bins
        .iter()
        .enumerate()
        .map(|(j, &bin)| {
            (
                bin,
                b.conv(&format!("pp.br{j}.conv"), branch_c, c, 1, 1, 0, true),
            )
        })
        .collect::<Vec<_>>();
    let c_cat = c + branches.len() * branch_c;
    let fuse = b.conv("pp.fuse", c, c_cat, 3, 1, 1, true);
    let pp = PpArch { branches, fuse };

    let mut decoders = Vec::new();
    for st in (1..=cfg.encoder_stages).rev() {
        let (w_in, w_out) = (cfg.width(st), cfg.width(st - 1));
        let mid = w_in / 4;
        let prefix = format!("dec{st}");
        decoders.push(DecoderArch {
            conv_in: b.conv(&format!("{prefix}.conv_in"), mid, w_in, 1, 1, 0, false),
            bn_in: b.bn(&format!("{prefix}.bn_in"), mid),
            tconv: b.tconv(&format!("{prefix}.tconv"), mid, mid, 4, 2, 1),
            bn_mid: b.bn(&format!("{prefix}.bn_mid"), mid),
            conv_out: b.conv(&format!("{prefix}.conv_out"), w_out, mid, 1, 1, 0, false),
            bn_out: b.bn(&format!("{prefix}.bn_out"), w_out),
        });
    }

    let head = b.conv("head", 1, cfg.width(0), 3, 1, 1, true);

    Ok(Model {
        cfg: cfg.clone(),
        params: b.params,
        arch: Arch {
            stem_conv,
            stem_bn,
            stages,
            pp,
            decoders,
            head,
        },
    })
}

struct BlockCache<T> {
    x_in: Tensor<T>,
    bn1: BnCache<T>,
    relu1: Tensor<T>,
    bn2: BnCache<T>,
    down_bn: Option<BnCache<T>>,
    y_out: Tensor<T>,
}

struct PpCache<T> {
    x_in: Tensor<T>,
    pooled: Vec<Tensor<T>>,
    branch_out: Vec<Tensor<T>>,
    fused_in: Tensor<T>,
}

struct DecoderCache<T> {
    x_in: Tensor<T>,
    bn_in: BnCache<T>,
    relu_in: Tensor<T>,
    bn_mid: BnCache<T>,
    relu_mid: Tensor<T>,
    bn_out: BnCache<T>,
    y_out: Tensor<T>,
}

/// Everything backward needs from a train-mode forward pass.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_out: Tensor<T>,
    stages: Vec<Vec<BlockCache<T>>>,
    pp: PpCache<T>,
    decoders: Vec<DecoderCache<T>>,
    head_in: Tensor<T>,
}

fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data_mut().iter_mut().zip(b.data().iter()) {
        *x = *x + *y;
    }
}

impl<T: Scalar> Model<T> {
    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total scalar count, running statistics included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            arch: self.arch.clone(),
        }
    }

    /// Flattened copy of every parameter value, in storage order.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrite every parameter from a flat buffer (inverse of
    /// [`flatten_params`](Self::flatten_params)).
    pub fn unflatten_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn val(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].value
    }

    fn bias_slice(&self, c: &ConvRef) -> Option<&[T]> {
        c.b.map(|i| self.params[i].value.data())
    }

    fn run_conv(&self, c: &ConvRef, x: &Tensor<T>) -> Tensor<T> {
        conv2d(x, self.val(c.w), self.bias_slice(c), c.stride, c.pad)
            .expect("conv shapes fixed by construction")
    }

    fn run_tconv(&self, c: &ConvRef, x: &Tensor<T>) -> Tensor<T> {
        transposed_conv2d(x, self.val(c.w), self.bias_slice(c), c.stride, c.pad)
            .expect("tconv shapes fixed by construction")
    }

    fn run_bn_train(&self, b: &BnRef, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        batch_norm_train(
            x,
            self.val(b.gamma).data(),
            self.val(b.beta).data(),
            BN_EPS,
        )
    }

    fn run_bn_eval(&self, b: &BnRef, x: &Tensor<T>) -> Tensor<T> {
        batch_norm_eval(
            x,
            self.val(b.gamma).data(),
            self.val(b.beta).data(),
            self.val(b.rmean).data(),
            self.val(b.rvar).data(),
            BN_EPS,
        )
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        let [_, c, h, w] = x.shape();
        if c != self.cfg.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "input has {c} channels, config wants {}",
                self.cfg.in_channels
            )));
        }
        self.cfg.validate_input(h, w)
    }

    /// Train-mode forward: batch statistics, caches kept for backward.
    /// Running statistics are *not* touched; see
    /// [`update_running`](Self::update_running).
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
        self.check_input(x)?;
        let a = &self.arch;

        let c = self.run_conv(&a.stem_conv, x);
        let (bn, stem_bn) = self.run_bn_train(&a.stem_bn, &c);
        let stem_out = relu(&bn);

        let mut skips: Vec<Tensor<T>> = vec![stem_out.clone()];
        let mut cur = stem_out.clone();
        let mut stage_caches = Vec::new();
        for blocks in &a.stages {
            let mut block_caches = Vec::new();
            for blk in blocks {
                let c1 = self.run_conv(&blk.conv1, &cur);
                let (b1, bn1) = self.run_bn_train(&blk.bn1, &c1);
                let r1 = relu(&b1);
                let c2 = self.run_conv(&blk.conv2, &r1);
                let (mut sum, bn2) = self.run_bn_train(&blk.bn2, &c2);
                let down_bn = match &blk.down {
                    Some((dc, dbn)) => {
                        let sk = self.run_conv(dc, &cur);
                        let (skb, dcache) = self.run_bn_train(dbn, &sk);
                        add_assign(&mut sum, &skb);
                        Some(dcache)
                    }
                    None => {
                        add_assign(&mut sum, &cur);
                        None
                    }
                };
                let y = relu(&sum);
                block_caches.push(BlockCache {
                    x_in: cur,
                    bn1,
                    relu1: r1,
                    bn2,
                    down_bn,
                    y_out: y.clone(),
                });
                cur = y;
            }
            skips.push(cur.clone());
            stage_caches.push(block_caches);
        }

        // pyramid pooling over the deepest feature
        let deep = cur;
        let [_, _, dh, dw] = deep.shape();
        let mut pooled = Vec::new();
        let mut branch_out = Vec::new();
        let mut ups: Vec<Tensor<T>> = Vec::new();
        for (bin, conv) in &a.pp.branches {
            let p = adaptive_avg_pool(&deep, *bin)?;
            let co = self.run_conv(conv, &p);
            ups.push(bilinear_upsample(&co, dh, dw));
            pooled.push(p);
            branch_out.push(co);
        }
        let mut parts: Vec<&Tensor<T>> = vec![&deep];
        parts.extend(ups.iter());
        let fused_in = concat_channels(&parts)?;
        let pp_out = self.run_conv(&a.pp.fuse, &fused_in);
        let pp_cache = PpCache {
            x_in: deep,
            pooled,
            branch_out,
            fused_in,
        };

        // decoder with additive skips; skips[st-1] pairs with decoder for stage st
        let mut cur = pp_out;
        let mut dec_caches = Vec::new();
        for (i, dec) in a.decoders.iter().enumerate() {
            let x_in = cur;
            let c_in = self.run_conv(&dec.conv_in, &x_in);
            let (b_in, bn_in) = self.run_bn_train(&dec.bn_in, &c_in);
            let r_in = relu(&b_in);
            let t = self.run_tconv(&dec.tconv, &r_in);
            let (b_mid, bn_mid) = self.run_bn_train(&dec.bn_mid, &t);
            let r_mid = relu(&b_mid);
            let c_out = self.run_conv(&dec.conv_out, &r_mid);
            let (b_out, bn_out) = self.run_bn_train(&dec.bn_out, &c_out);
            let y = relu(&b_out);
            let skip = &skips[a.decoders.len() - 1 - i];
            let mut summed = y.clone();
            add_assign(&mut summed, skip);
            dec_caches.push(DecoderCache {
                x_in,
                bn_in,
                relu_in: r_in,
                bn_mid,
                relu_mid: r_mid,
                bn_out,
                y_out: y,
            });
            cur = summed;
        }

        let head_in = cur;
        let logits = self.run_conv(&a.head, &head_in);
        Ok((
            logits,
            ForwardCache {
                input: x.clone(),
                stem_bn,
                stem_out,
                stages: stage_caches,
                pp: pp_cache,
                decoders: dec_caches,
                head_in,
            },
        ))
    }

    /// Eval-mode forward: frozen running statistics, no caches. Pure.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let a = &self.arch;

        let c = self.run_conv(&a.stem_conv, x);
        let stem_out = relu(&self.run_bn_eval(&a.stem_bn, &c));

        let mut skips: Vec<Tensor<T>> = vec![stem_out.clone()];
        let mut cur = stem_out;
        for blocks in &a.stages {
            for blk in blocks {
                let c1 = self.run_conv(&blk.conv1, &cur);
                let r1 = relu(&self.run_bn_eval(&blk.bn1, &c1));
                let c2 = self.run_conv(&blk.conv2, &r1);
                let mut sum = self.run_bn_eval(&blk.bn2, &c2);
                match &blk.down {
                    Some((dc, dbn)) => {
                        let sk = self.run_bn_eval(dbn, &self.run_conv(dc, &cur));
                        add_assign(&mut sum, &sk);
                    }
                    None => add_assign(&mut sum, &cur),
                }
                cur = relu(&sum);
            }
            skips.push(cur.clone());
        }

        let deep = cur;
        let [_, _, dh, dw] = deep.shape();
        let mut ups = Vec::new();
        for (bin, conv) in &a.pp.branches {
            let p = adaptive_avg_pool(&deep, *bin)?;
            let co = self.run_conv(conv, &p);
            ups.push(bilinear_upsample(&co, dh, dw));
        }
        let mut parts: Vec<&Tensor<T>> = vec![&deep];
        parts.extend(ups.iter());
        let fused_in = concat_channels(&parts)?;
        let mut cur = self.run_conv(&a.pp.fuse, &fused_in);

        for (i, dec) in a.decoders.iter().enumerate() {
            let c_in = self.run_conv(&dec.conv_in, &cur);
            let r_in = relu(&self.run_bn_eval(&dec.bn_in, &c_in));
            let t = self.run_tconv(&dec.tconv, &r_in);
            let r_mid = relu(&self.run_bn_eval(&dec.bn_mid, &t));
            let c_out = self.run_conv(&dec.conv_out, &r_mid);
            let mut y = relu(&self.run_bn_eval(&dec.bn_out, &c_out));
            add_assign(&mut y, &skips[a.decoders.len() - 1 - i]);
            cur = y;
        }

        Ok(self.run_conv(&a.head, &cur))
    }

    fn conv_backward_acc(
        &mut self,
        c: &ConvRef,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (dx, dk, db) = conv2d_backward(x, &self.params[c.w].value, dy, c.stride, c.pad)
            .expect("conv shapes fixed by construction");
        self.params[c.w].value.add_grad(dk.data());
        if let Some(bi) = c.b {
            self.params[bi].value.add_grad(&db);
        }
        dx
    }

    fn tconv_backward_acc(
        &mut self,
        c: &ConvRef,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (dx, dk, db) =
            transposed_conv2d_backward(x, &self.params[c.w].value, dy, c.stride, c.pad)
                .expect("tconv shapes fixed by construction");
        self.params[c.w].value.add_grad(dk.data());
        if let Some(bi) = c.b {
            self.params[bi].value.add_grad(&db);
        }
        dx
    }

    fn bn_backward_acc(&mut self, b: &BnRef, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let gamma: Vec<T> = self.params[b.gamma].value.data().to_vec();
        let (dx, dg, dbeta) = batch_norm_train_backward(dy, &gamma, cache);
        self.params[b.gamma].value.add_grad(&dg);
        self.params[b.beta].value.add_grad(&dbeta);
        dx
    }

    /// Backward through the whole model, accumulating parameter gradients.
    /// Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let arch = self.arch.clone();

        // head
        let mut d_cur = self.conv_backward_acc(&arch.head, &cache.head_in, dlogits);

        // decoders in reverse; collect gradients flowing into encoder skips
        let n_dec = arch.decoders.len();
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; n_dec + 1];
        for (i, dec) in arch.decoders.iter().enumerate().rev() {
            let dc = &cache.decoders[i];
            // d_cur is the gradient of (decoder output + skip)
            let skip_idx = n_dec - 1 - i;
            match &mut skip_grads[skip_idx] {
                slot @ None => *slot = Some(d_cur.clone()),
                Some(g) => add_assign(g, &d_cur),
            }
            let d_y = relu_backward(&dc.y_out, &d_cur);
            let d_bn_out = self.bn_backward_acc(&dec.bn_out, &dc.bn_out, &d_y);
            let d_rmid = self.conv_backward_acc(&dec.conv_out, &dc.relu_mid, &d_bn_out);
            let d_bmid = relu_backward(&dc.relu_mid, &d_rmid);
            let d_t = self.bn_backward_acc(&dec.bn_mid, &dc.bn_mid, &d_bmid);
            let d_rin = self.tconv_backward_acc(&dec.tconv, &dc.relu_in, &d_t);
            let d_bin = relu_backward(&dc.relu_in, &d_rin);
            let d_cin = self.bn_backward_acc(&dec.bn_in, &dc.bn_in, &d_bin);
            d_cur = self.conv_backward_acc(&dec.conv_in, &dc.x_in, &d_cin);
        }

        // pyramid pooling; d_cur is the gradient of its output
        {
            let pc = &cache.pp;
            let d_fused = self.conv_backward_acc(&arch.pp.fuse, &pc.fused_in, &d_cur);
            let c = pc.x_in.shape()[1];
            let branch_c = c / 4;
            let mut counts = vec![c];
            counts.extend(std::iter::repeat(branch_c).take(arch.pp.branches.len()));
            let mut parts = split_channels(&d_fused, &counts);
            let mut d_deep = parts.remove(0);
            for (j, (_bin, conv)) in arch.pp.branches.iter().enumerate() {
                let d_up = &parts[j];
                let d_co = bilinear_upsample_backward(pc.branch_out[j].shape(), d_up);
                let d_pool = self.conv_backward_acc(conv, &pc.pooled[j], &d_co);
                let d_x = adaptive_avg_pool_backward(pc.x_in.shape(), &d_pool);
                add_assign(&mut d_deep, &d_x);
            }
            d_cur = d_deep;
        }

        // encoder stages in reverse, merging decoder skip gradients
        for (si, blocks) in arch.stages.iter().enumerate().rev() {
            if let Some(g) = skip_grads[si + 1].take() {
                add_assign(&mut d_cur, &g);
            }
            for (bi, blk) in blocks.iter().enumerate().rev() {
                let bc = &cache.stages[si][bi];
                let d_sum = relu_backward(&bc.y_out, &d_cur);
                // main branch
                let d_c2bn = self.bn_backward_acc(&blk.bn2, &bc.bn2, &d_sum);
                let d_r1 = self.conv_backward_acc(&blk.conv2, &bc.relu1, &d_c2bn);
                let d_b1 = relu_backward(&bc.relu1, &d_r1);
                let d_c1 = self.bn_backward_acc(&blk.bn1, &bc.bn1, &d_b1);
                let mut d_x = self.conv_backward_acc(&blk.conv1, &bc.x_in, &d_c1);
                // skip branch
                match (&blk.down, &bc.down_bn) {
                    (Some((dc, dbn)), Some(dcache)) => {
                        let d_skc = self.bn_backward_acc(dbn, dcache, &d_sum);
                        let d_sk = self.conv_backward_acc(dc, &bc.x_in, &d_skc);
                        add_assign(&mut d_x, &d_sk);
                    }
                    (None, None) => add_assign(&mut d_x, &d_sum),
                    _ => unreachable!("cache must mirror architecture"),
                }
                d_cur = d_x;
            }
        }

        // stem (also receives the decoder skip at full resolution)
        if let Some(g) = skip_grads[0].take() {
            add_assign(&mut d_cur, &g);
        }
        let d_bn = relu_backward(&cache.stem_out, &d_cur);
        let d_conv = self.bn_backward_acc(&arch.stem_bn, &cache.stem_bn, &d_bn);
        self.conv_backward_acc(&arch.stem_conv, &cache.input, &d_conv)
    }

    /// Fold the batch statistics recorded in `cache` into the running
    /// statistics (momentum [`BN_MOMENTUM`]).
    pub fn update_running(&mut self, cache: &ForwardCache<T>) {
        let arch = self.arch.clone();
        let mut apply = |bn: &BnRef, c: &BnCache<T>| {
            let mut mean = self.params[bn.rmean].value.data().to_vec();
            let mut var = self.params[bn.rvar].value.data().to_vec();
            update_running_stats(&mut mean, &mut var, c, BN_MOMENTUM);
            self.params[bn.rmean].value.data_mut().copy_from_slice(&mean);
            self.params[bn.rvar].value.data_mut().copy_from_slice(&var);
        };
        apply(&arch.stem_bn, &cache.stem_bn);
        for (si, blocks) in arch.stages.iter().enumerate() {
            for (bi, blk) in blocks.iter().enumerate() {
                let bc = &cache.stages[si][bi];
                apply(&blk.bn1, &bc.bn1);
                apply(&blk.bn2, &bc.bn2);
                if let (Some((_, dbn)), Some(dcache)) = (&blk.down, &bc.down_bn) {
                    apply(dbn, dcache);
                }
            }
        }
        for (i, dec) in arch.decoders.iter().enumerate() {
            let dc = &cache.decoders[i];
            apply(&dec.bn_in, &dc.bn_in);
            apply(&dec.bn_mid, &dc.bn_mid);
            apply(&dec.bn_out, &dc.bn_out);
        }
    }
}
