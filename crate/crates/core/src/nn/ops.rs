//! Layer kernels and their hand-derived backward passes.
//!
//! Every backward here is certified against central finite differences in
//! `f64` (see the tests and the `fd` module). Loops are ordered so the
//! innermost dimension walks contiguous memory; everything is
//! single-threaded and bitwise deterministic.

use thiserror::Error;

use super::tensor::{s, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad model config: {0}")]
    ConfigError(String),
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

/// Output spatial extent of a convolution: ⌊(in + 2·pad − k)/stride⌋ + 1.
pub fn conv_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> Result<usize, NnError> {
    let padded = inp + 2 * pad;
    if padded < k {
        return Err(shape_err(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// 2-D convolution. Kernel shape `(c_out, c_in, kh, kw)`; optional per-output
/// channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NnError> {
    assert!(stride >= 1);
    let [n, ci, h, w] = x.shape();
    let [co, kci, kh, kw] = k.shape();
    if ci != kci {
        return Err(shape_err(format!(
            "conv2d: input has {ci} channels, kernel expects {kci}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(shape_err(format!(
                "conv2d: bias length {} != {co} output channels",
                b.len()
            )));
        }
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    let mut out = Tensor::zeros([n, co, oh, ow]);

    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for b in 0..n {
        for c_out in 0..co {
            let o_base = (b * co + c_out) * oh * ow;
            if let Some(bias) = bias {
                od[o_base..o_base + oh * ow]
                    .iter_mut()
                    .for_each(|v| *v = bias[c_out]);
            }
            for c_in in 0..ci {
                let x_base = (b * ci + c_in) * h * w;
                let k_base = (c_out * ci + c_in) * kh * kw;
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wgt = kd[k_base + dkh * kw + dkw];
                        // valid output ranges for this kernel tap
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, dkh);
                        let (ox_lo, ox_hi) = tap_range(ow, w, stride, pad, dkw);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dkh - pad;
                            let x_row = x_base + iy * w;
                            let o_row = o_base + oy * ow;
                            let mut ix = ox_lo * stride + dkw - pad;
                            for ox in ox_lo..ox_hi {
                                od[o_row + ox] = od[o_row + ox] + xd[x_row + ix] * wgt;
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Half-open output index range `[lo, hi)` for which
/// `o·stride + tap − pad` lands inside `[0, extent)`.
#[inline]
fn tap_range(out_extent: usize, extent: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi_in = extent + pad;
    if hi_in <= tap {
        return (lo, lo);
    }
    let hi = ((hi_in - tap - 1) / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

/// Gradients of [`conv2d`] w.r.t. input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), NnError> {
    let [n, ci, h, w] = x.shape();
    let [co, kci, kh, kw] = k.shape();
    if ci != kci {
        return Err(shape_err("conv2d_backward: channel mismatch".to_string()));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    if dy.shape() != [n, co, oh, ow] {
        return Err(shape_err(format!(
            "conv2d_backward: dy shape {:?} != {:?}",
            dy.shape(),
            [n, co, oh, ow]
        )));
    }

    let mut dx = Tensor::zeros([n, ci, h, w]);
    let mut dk = Tensor::zeros([co, ci, kh, kw]);
    let mut db = vec![T::zero(); co];

    let xd = x.data();
    let kd = k.data();
    let gd = dy.data();
    let dxd = dx.data_mut();
    let dkd = dk.data_mut();

    for b in 0..n {
        for c_out in 0..co {
            let g_base = (b * co + c_out) * oh * ow;
            let mut bias_acc = T::zero();
            for v in &gd[g_base..g_base + oh * ow] {
                bias_acc = bias_acc + *v;
            }
            db[c_out] = db[c_out] + bias_acc;
            for c_in in 0..ci {
                let x_base = (b * ci + c_in) * h * w;
                let k_base = (c_out * ci + c_in) * kh * kw;
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wgt = kd[k_base + dkh * kw + dkw];
                        let mut w_acc = T::zero();
                        let (oy_lo, oy_hi) = tap_range(oh, h, stride, pad, dkh);
                        let (ox_lo, ox_hi) = tap_range(ow, w, stride, pad, dkw);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + dkh - pad;
                            let x_row = x_base + iy * w;
                            let g_row = g_base + oy * ow;
                            let mut ix = ox_lo * stride + dkw - pad;
                            for ox in ox_lo..ox_hi {
                                let g = gd[g_row + ox];
                                w_acc = w_acc + xd[x_row + ix] * g;
                                dxd[x_row + ix] = dxd[x_row + ix] + g * wgt;
                                ix += stride;
                            }
                        }
                        dkd[k_base + dkh * kw + dkw] = dkd[k_base + dkh * kw + dkw] + w_acc;
                    }
                }
            }
        }
    }
    Ok((dx, dk, db))
}

/// Transposed 2-D convolution (fractionally strided). Kernel shape
/// `(c_in, c_out, kh, kw)`. Each input element stamps the kernel into the
/// output at `out = in·stride − pad + tap`; with kernel 4, stride 2, pad 1
/// the output is exactly twice the input extent.
pub fn transposed_conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NnError> {
    let [n, ci, h, w] = x.shape();
    let [kci, co, kh, kw] = k.shape();
    if ci != kci {
        return Err(shape_err(format!(
            "transposed_conv2d: input has {ci} channels, kernel expects {kci}"
        )));
    }
    if kh < stride || kw < stride {
        return Err(shape_err("transposed_conv2d: kernel smaller than stride".to_string()));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    if oh < 2 * pad || ow < 2 * pad {
        return Err(shape_err("transposed_conv2d: padding exceeds output".to_string()));
    }
    let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
    let mut out = Tensor::zeros([n, co, oh, ow]);

    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for b in 0..n {
        for c_out in 0..co {
            let o_base = (b * co + c_out) * oh * ow;
            if let Some(bias) = bias {
                od[o_base..o_base + oh * ow]
                    .iter_mut()
                    .for_each(|v| *v = bias[c_out]);
            }
            for c_in in 0..ci {
                let x_base = (b * ci + c_in) * h * w;
                let k_base = (c_in * co + c_out) * kh * kw;
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wgt = kd[k_base + dkh * kw + dkw];
                        let (iy_lo, iy_hi) = tap_range(h, oh, stride, pad, dkh);
                        let (ix_lo, ix_hi) = tap_range(w, ow, stride, pad, dkw);
                        for iy in iy_lo..iy_hi {
                            let oy = iy * stride + dkh - pad;
                            let x_row = x_base + iy * w;
                            let o_row = o_base + oy * ow;
                            let mut ox = ix_lo * stride + dkw - pad;
                            for ix in ix_lo..ix_hi {
                                od[o_row + ox] = od[o_row + ox] + xd[x_row + ix] * wgt;
                                ox += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`transposed_conv2d`] w.r.t. input, kernel, and bias.
pub fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), NnError> {
    let [n, ci, h, w] = x.shape();
    let [kci, co, kh, kw] = k.shape();
    if ci != kci {
        return Err(shape_err("transposed_conv2d_backward: channel mismatch".to_string()));
    }
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    if dy.shape() != [n, co, oh, ow] {
        return Err(shape_err(format!(
            "transposed_conv2d_backward: dy shape {:?} != {:?}",
            dy.shape(),
            [n, co, oh, ow]
        )));
    }

    let mut dx = Tensor::zeros([n, ci, h, w]);
    let mut dk = Tensor::zeros([ci, co, kh, kw]);
    let mut db = vec![T::zero(); co];

    let xd = x.data();
    let kd = k.data();
    let gd = dy.data();
    let dxd = dx.data_mut();
    let dkd = dk.data_mut();

    for b in 0..n {
        for c_out in 0..co {
            let g_base = (b * co + c_out) * oh * ow;
            let mut bias_acc = T::zero();
            for v in &gd[g_base..g_base + oh * ow] {
                bias_acc = bias_acc + *v;
            }
            db[c_out] = db[c_out] + bias_acc;
            for c_in in 0..ci {
                let x_base = (b * ci + c_in) * h * w;
                let k_base = (c_in * co + c_out) * kh * kw;
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wgt = kd[k_base + dkh * kw + dkw];
                        let mut w_acc = T::zero();
                        let (iy_lo, iy_hi) = tap_range(h, oh, stride, pad, dkh);
                        let (ix_lo, ix_hi) = tap_range(w, ow, stride, pad, dkw);
                        for iy in iy_lo..iy_hi {
                            let oy = iy * stride + dkh - pad;
                            let x_row = x_base + iy * w;
                            let g_row = g_base + oy * ow;
                            let mut ox = ix_lo * stride + dkw - pad;
                            for ix in ix_lo..ix_hi {
                                let g = gd[g_row + ox];
                                w_acc = w_acc + xd[x_row + ix] * g;
                                dxd[x_row + ix] = dxd[x_row + ix] + g * wgt;
                                ox += stride;
                            }
                        }
                        dkd[k_base + dkh * kw + dkw] = dkd[k_base + dkh * kw + dkw] + w_acc;
                    }
                }
            }
        }
    }
    Ok((dx, dk, db))
}

/// Saved batch statistics from a train-mode normalization pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    /// Population (biased) variance per channel.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Tensor<T>,
}

/// Train-mode batch normalization over `(n, h, w)` per channel, ε inside the
/// square root. Pure: running statistics are updated separately via
/// [`update_running_stats`].
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, BnCache<T>) {
    let [n, c, h, w] = x.shape();
    assert_eq!(gamma.len(), c, "gamma length");
    assert_eq!(beta.len(), c, "beta length");
    let m = n * h * w;
    let minv: T = s::<T>(1.0) / s::<T>(m as f64);
    let epst: T = s(eps);

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());

    let xd = x.data();
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for &v in &xd[base..base + h * w] {
                acc = acc + v;
            }
        }
        let mu = acc * minv;
        let mut vacc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for &v in &xd[base..base + h * w] {
                let d = v - mu;
                vacc = vacc + d * d;
            }
        }
        let va = vacc * minv;
        let istd = T::one() / (va + epst).sqrt();
        mean[ch] = mu;
        var[ch] = va;
        inv_std[ch] = istd;
        let (g, bt) = (gamma[ch], beta[ch]);
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for i in base..base + h * w {
                let xh = (xd[i] - mu) * istd;
                xhat.data[i] = xh;
                y.data[i] = g * xh + bt;
            }
        }
    }
    (
        y,
        BnCache {
            mean,
            var,
            inv_std,
            xhat,
        },
    )
}

/// Gradients of train-mode batch norm w.r.t. input, γ, β.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.shape();
    let m = n * h * w;
    let minv: T = s::<T>(1.0) / s::<T>(m as f64);

    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];

    let gd = dy.data();
    let xh = cache.xhat.data();
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for i in base..base + h * w {
                sum_dy = sum_dy + gd[i];
                sum_dy_xhat = sum_dy_xhat + gd[i] * xh[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
        let scale = gamma[ch] * cache.inv_std[ch];
        let mean_dy = sum_dy * minv;
        let mean_dy_xhat = sum_dy_xhat * minv;
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for i in base..base + h * w {
                dx.data[i] = scale * (gd[i] - mean_dy - xh[i] * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch normalization against frozen running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(gamma.len(), c, "gamma length");
    let epst: T = s(eps);
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    for ch in 0..c {
        let istd = T::one() / (running_var[ch] + epst).sqrt();
        let (mu, g, bt) = (running_mean[ch], gamma[ch], beta[ch]);
        for b in 0..n {
            let base = (b * c + ch) * h * w;
            for i in base..base + h * w {
                y.data[i] = g * (xd[i] - mu) * istd + bt;
            }
        }
    }
    y
}

/// Exponential moving-average update of running statistics:
/// `r ← (1−momentum)·r + momentum·batch`.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BnCache<T>,
    momentum: f64,
) {
    let mom: T = s(momentum);
    let keep = T::one() - mom;
    for (r, &b) in running_mean.iter_mut().zip(cache.mean.iter()) {
        *r = keep * *r + mom * b;
    }
    for (r, &b) in running_var.iter_mut().zip(cache.var.iter()) {
        *r = keep * *r + mom * b;
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(T::zero()));
    y
}

/// Backward through ReLU given the *output* `y` (zero exactly where the
/// activation clamped).
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(y.shape(), dy.shape());
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data().iter()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// 2×2 max pooling, stride 2. Returns the pooled tensor and per-output
/// argmax indices (flat into the input) for the backward pass.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("max_pool2: odd extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let mut oi = 0usize;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = base + (2 * oy) * w + 2 * ox;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    y.data[oi] = xd[best];
                    arg[oi] = best;
                    oi += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2_backward<T: Scalar>(
    x_shape: [usize; 4],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (o, &i) in argmax.iter().enumerate() {
        dx.data[i] = dx.data[i] + dy.data()[o];
    }
    dx
}

/// Adaptive average pooling to `bins`×`bins`; spatial extents must divide.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, bins: usize) -> Result<Tensor<T>, NnError> {
    let [n, c, h, w] = x.shape();
    if bins == 0 || h % bins != 0 || w % bins != 0 {
        return Err(shape_err(format!(
            "adaptive_avg_pool: {h}x{w} not divisible into {bins} bins"
        )));
    }
    let (ch_, cw) = (h / bins, w / bins);
    let inv: T = s::<T>(1.0) / s::<T>((ch_ * cw) as f64);
    let mut y = Tensor::zeros([n, c, bins, bins]);
    let xd = x.data();
    let mut oi = 0usize;
    for b in 0..n {
        for chan in 0..c {
            let base = (b * c + chan) * h * w;
            for by in 0..bins {
                for bx in 0..bins {
                    let mut acc = T::zero();
                    for yy in by * ch_..(by + 1) * ch_ {
                        let row = base + yy * w;
                        for xx in bx * cw..(bx + 1) * cw {
                            acc = acc + xd[row + xx];
                        }
                    }
                    y.data[oi] = acc * inv;
                    oi += 1;
                }
            }
        }
    }
    Ok(y)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    x_shape: [usize; 4],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let [dn, dc, bins, bins2] = dy.shape();
    assert_eq!((dn, dc), (n, c));
    assert_eq!(bins, bins2);
    let (ch_, cw) = (h / bins, w / bins);
    let inv: T = s::<T>(1.0) / s::<T>((ch_ * cw) as f64);
    let mut dx = Tensor::zeros(x_shape);
    let gd = dy.data();
    let mut oi = 0usize;
    for b in 0..n {
        for chan in 0..c {
            let base = (b * c + chan) * h * w;
            for by in 0..bins {
                for bx in 0..bins {
                    let g = gd[oi] * inv;
                    oi += 1;
                    for yy in by * ch_..(by + 1) * ch_ {
                        let row = base + yy * w;
                        for xx in bx * cw..(bx + 1) * cw {
                            dx.data[row + xx] = dx.data[row + xx] + g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source-side interpolation taps for one output index under the
/// half-pixel (align_corners=false) convention.
#[inline]
fn bilinear_taps(out_i: usize, out_extent: usize, in_extent: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let i0 = src.floor();
    let t = src - i0;
    let lo = (i0.max(0.0) as usize).min(in_extent - 1);
    let hi = ((i0 + 1.0).max(0.0) as usize).min(in_extent - 1);
    (lo, hi, t)
}

/// Bilinear upsampling with the half-pixel (align_corners=false) convention;
/// edge samples clamp. Constant inputs map to constant outputs.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, out_h, out_w]);
    let xd = x.data();

    let taps_y: Vec<(usize, usize, f64)> =
        (0..out_h).map(|i| bilinear_taps(i, out_h, h)).collect();
    let taps_x: Vec<(usize, usize, f64)> =
        (0..out_w).map(|i| bilinear_taps(i, out_w, w)).collect();

    let mut oi = 0usize;
    for b in 0..n {
        for chan in 0..c {
            let base = (b * c + chan) * h * w;
            for &(y0, y1, ty) in &taps_y {
                let (wy0, wy1): (T, T) = (s(1.0 - ty), s(ty));
                let r0 = base + y0 * w;
                let r1 = base + y1 * w;
                for &(x0, x1, tx) in &taps_x {
                    let (wx0, wx1): (T, T) = (s(1.0 - tx), s(tx));
                    y.data[oi] = wy0 * (wx0 * xd[r0 + x0] + wx1 * xd[r0 + x1])
                        + wy1 * (wx0 * xd[r1 + x0] + wx1 * xd[r1 + x1]);
                    oi += 1;
                }
            }
        }
    }
    y
}

pub fn bilinear_upsample_backward<T: Scalar>(
    x_shape: [usize; 4],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let [dn, dc, oh, ow] = dy.shape();
    assert_eq!((dn, dc), (n, c));
    let mut dx = Tensor::zeros(x_shape);
    let gd = dy.data();

    let taps_y: Vec<(usize, usize, f64)> = (0..oh).map(|i| bilinear_taps(i, oh, h)).collect();
    let taps_x: Vec<(usize, usize, f64)> = (0..ow).map(|i| bilinear_taps(i, ow, w)).collect();

    let mut oi = 0usize;
    for b in 0..n {
        for chan in 0..c {
            let base = (b * c + chan) * h * w;
            for &(y0, y1, ty) in &taps_y {
                let (wy0, wy1): (T, T) = (s(1.0 - ty), s(ty));
                let r0 = base + y0 * w;
                let r1 = base + y1 * w;
                for &(x0, x1, tx) in &taps_x {
                    let (wx0, wx1): (T, T) = (s(1.0 - tx), s(tx));
                    let g = gd[oi];
                    oi += 1;
                    dx.data[r0 + x0] = dx.data[r0 + x0] + g * wy0 * wx0;
                    dx.data[r0 + x1] = dx.data[r0 + x1] + g * wy0 * wx1;
                    dx.data[r1 + x0] = dx.data[r1 + x0] + g * wy1 * wx0;
                    dx.data[r1 + x1] = dx.data[r1 + x1] + g * wy1 * wx1;
                }
            }
        }
    }
    dx
}

/// Concatenate tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, NnError> {
    assert!(!parts.is_empty());
    let [n, _, h, w] = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(shape_err("concat_channels: extents differ".to_string()));
        }
        c_total += pc;
    }
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let plane = h * w;
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data()[b * pc * plane..(b + 1) * pc * plane];
            let dst_base = (b * c_total + c_off) * plane;
            out.data_mut()[dst_base..dst_base + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, channel_counts: &[usize]) -> Vec<Tensor<T>> {
    let [n, c, h, w] = dy.shape();
    assert_eq!(channel_counts.iter().sum::<usize>(), c);
    let plane = h * w;
    let mut out: Vec<Tensor<T>> = channel_counts
        .iter()
        .map(|&pc| Tensor::zeros([n, pc, h, w]))
        .collect();
    for b in 0..n {
        let mut c_off = 0;
        for (part, &pc) in out.iter_mut().zip(channel_counts.iter()) {
            let src_base = (b * c + c_off) * plane;
            let dst = &mut part.data_mut()[b * pc * plane..(b + 1) * pc * plane];
            dst.copy_from_slice(&dy.data()[src_base..src_base + pc * plane]);
            c_off += pc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd::{max_rel_err, numeric_grad};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, [1, 1, 4, 4]);
        let k = Tensor::from_vec([1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn conv_all_ones_sums() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_relative_eq!(y.data()[0], 9.0);
    }

    // Direct 6-loop definition with branch-per-element bounds handling.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [n, ci, h, w] = x.shape();
        let [co, _, kh, kw] = k.shape();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        for b in 0..n {
            for c_out in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |bs| bs[c_out]);
                        for c_in in 0..ci {
                            for dkh in 0..kh {
                                for dkw in 0..kw {
                                    let iy = (oy * stride + dkh) as isize - pad as isize;
                                    let ix = (ox * stride + dkw) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x.at(b, c_in, iy as usize, ix as usize)
                                            * k.at(c_out, c_in, dkh, dkw);
                                    }
                                }
                            }
                        }
                        *out.at_mut(b, c_out, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let x = randn(&mut rng, [2, 2, 5, 5]);
            let k = randn(&mut rng, [3, 2, 3, 3]);
            let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv2d(&x, &k, Some(&bias), stride, pad).unwrap();
            let o = conv_oracle(&x, &k, Some(&bias), stride, pad);
            assert_eq!(y.shape(), o.shape());
            for (a, b) in y.data().iter().zip(o.data().iter()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    // Flatten (x, k, bias) into one parameter vector, return ⟨op(θ), w⟩ and
    // its analytic gradient for finite-difference comparison.
    fn check_conv_gradients(stride: usize, pad: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, [2, 2, 5, 5]);
        let k = randn(&mut rng, [3, 2, 3, 3]);
        let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y0 = conv2d(&x, &k, Some(&bias), stride, pad).unwrap();
        let wvec: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (nx, nk, nb) = (x.numel(), k.numel(), bias.len());
        let theta: Vec<f64> = x
            .data()
            .iter()
            .chain(k.data().iter())
            .chain(bias.iter())
            .cloned()
            .collect();
        let xs = x.shape();
        let ks = k.shape();
        let f = |t: &[f64]| {
            let xt = Tensor::from_vec(xs, t[..nx].to_vec());
            let kt = Tensor::from_vec(ks, t[nx..nx + nk].to_vec());
            let bt = t[nx + nk..].to_vec();
            let y = conv2d(&xt, &kt, Some(&bt), stride, pad).unwrap();
            y.data().iter().zip(wvec.iter()).map(|(a, b)| a * b).sum()
        };
        let numeric = numeric_grad(f, &theta, 1e-5);

        let dy = Tensor::from_vec(y0.shape(), wvec.clone());
        let (dx, dk, db) = conv2d_backward(&x, &k, &dy, stride, pad).unwrap();
        let analytic: Vec<f64> = dx
            .data()
            .iter()
            .chain(dk.data().iter())
            .chain(db.iter())
            .cloned()
            .collect();
        assert_eq!(analytic.len(), nx + nk + nb);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "stride {stride} pad {pad}: rel err {err}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_gradients(1, 0, 3);
        check_conv_gradients(1, 1, 4);
        check_conv_gradients(2, 1, 5);
        check_conv_gradients(2, 0, 6);
    }

    #[test]
    fn conv_shape_mismatch_detected() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, None, 1, 1),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tconv_stamps_kernel_at_delta() {
        // single input pixel at (1,1), stride 2, no pad: kernel copied at (2,2)
        let mut x = Tensor::<f64>::zeros([1, 1, 3, 3]);
        *x.at_mut(0, 0, 1, 1) = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = randn(&mut rng, [1, 1, 4, 4]);
        let y = transposed_conv2d(&x, &k, None, 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 8, 8]);
        for oy in 0..8 {
            for ox in 0..8 {
                let expect = if (2..6).contains(&oy) && (2..6).contains(&ox) {
                    k.at(0, 0, oy - 2, ox - 2)
                } else {
                    0.0
                };
                assert_relative_eq!(y.at(0, 0, oy, ox), expect);
            }
        }
    }

    #[test]
    fn tconv_doubles_extent_with_k4_s2_p1() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, [1, 3, 5, 7]);
        let k = randn(&mut rng, [3, 2, 4, 4]);
        let y = transposed_conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), [1, 2, 10, 14]);
    }

    #[test]
    fn tconv_single_pixel_gives_kernel_center() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = randn(&mut rng, [1, 1, 4, 4]);
        let y = transposed_conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        // out(o) = x·k(o+pad) for o in {0,1}: the kernel's center 2×2 window
        for oy in 0..2 {
            for ox in 0..2 {
                assert_relative_eq!(y.at(0, 0, oy, ox), 2.0 * k.at(0, 0, oy + 1, ox + 1));
            }
        }
    }

    #[test]
    fn conv_tconv_adjoint_identity() {
        // ⟨conv(x), y⟩ = ⟨x, tconv(y)⟩ with a shared kernel buffer: the
        // conv kernel (co, ci, kh, kw) is read by tconv as (c_in=co, c_out=ci).
        // extents chosen so (in + 2·pad − k) divides by stride exactly,
        // otherwise conv's floor division drops taps and shapes differ
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (stride, pad, h, w) in [(1, 1, 6, 6), (2, 1, 7, 9), (2, 0, 7, 7)] {
            let x = randn(&mut rng, [2, 3, h, w]);
            let k = randn(&mut rng, [4, 3, 3, 3]);
            let cx = conv2d(&x, &k, None, stride, pad).unwrap();
            let y = randn(&mut rng, cx.shape());
            let ty = transposed_conv2d(&y, &k, None, stride, pad).unwrap();
            // tconv output can be larger than x when conv floor-divides;
            // these shapes are chosen so it matches exactly.
            assert_eq!(ty.shape(), x.shape(), "stride {stride} pad {pad}");
            let lhs: f64 = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data().iter()).map(|(a, b)| a * b).sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn conv_tconv_adjoint_identity_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv: Vec<f32> = (0..2 * 3 * 7 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f32> = (0..4 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec([2, 3, 7, 7], xv);
        let k = Tensor::from_vec([4, 3, 3, 3], kv);
        let cx = conv2d(&x, &k, None, 2, 1).unwrap();
        let yv: Vec<f32> = (0..cx.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = Tensor::from_vec(cx.shape(), yv);
        let ty = transposed_conv2d(&y, &k, None, 2, 1).unwrap();
        let lhs: f32 = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data().iter().zip(ty.data().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn tconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (stride, pad) in [(2, 1), (2, 0), (1, 1)] {
            let x = randn(&mut rng, [1, 3, 4, 4]);
            let k = randn(&mut rng, [3, 2, 4, 4]);
            let bias: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y0 = transposed_conv2d(&x, &k, Some(&bias), stride, pad).unwrap();
            let wvec: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (nx, nk) = (x.numel(), k.numel());
            let theta: Vec<f64> = x
                .data()
                .iter()
                .chain(k.data().iter())
                .chain(bias.iter())
                .cloned()
                .collect();
            let (xs, ks) = (x.shape(), k.shape());
            let f = |t: &[f64]| {
                let xt = Tensor::from_vec(xs, t[..nx].to_vec());
                let kt = Tensor::from_vec(ks, t[nx..nx + nk].to_vec());
                let bt = t[nx + nk..].to_vec();
                let y = transposed_conv2d(&xt, &kt, Some(&bt), stride, pad).unwrap();
                y.data().iter().zip(wvec.iter()).map(|(a, b)| a * b).sum()
            };
            let numeric = numeric_grad(f, &theta, 1e-5);

            let dy = Tensor::from_vec(y0.shape(), wvec.clone());
            let (dx, dk, db) = transposed_conv2d_backward(&x, &k, &dy, stride, pad).unwrap();
            let analytic: Vec<f64> = dx
                .data()
                .iter()
                .chain(dk.data().iter())
                .chain(db.iter())
                .cloned()
                .collect();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "stride {stride} pad {pad}: rel err {err}");
        }
    }

    #[test]
    fn bn_zero_variance_channel_is_zeroed() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 5.0);
        let (y, _) = batch_norm_train(&x, &[1.0], &[0.0], 1e-5);
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn bn_normalizes_to_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, [4, 3, 6, 6]);
        let gamma = [2.0, -1.5, 0.7];
        let beta = [0.3, 0.0, -2.0];
        let (y, _) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        let [n, c, h, w] = y.shape();
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            for b in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        mean += y.at(b, ch, yy, xx);
                    }
                }
            }
            mean /= m;
            let mut var = 0.0;
            for b in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        var += (y.at(b, ch, yy, xx) - mean).powi(2);
                    }
                }
            }
            var /= m;
            assert!((mean - beta[ch]).abs() < 1e-4, "channel {ch} mean {mean}");
            assert!(
                (var.sqrt() - gamma[ch].abs()).abs() < 1e-4,
                "channel {ch} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, [2, 3, 4, 4]);
        let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
        let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (y0, _) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        let wvec: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let nx = x.numel();
        let theta: Vec<f64> = x
            .data()
            .iter()
            .chain(gamma.iter())
            .chain(beta.iter())
            .cloned()
            .collect();
        let xs = x.shape();
        let f = |t: &[f64]| {
            let xt = Tensor::from_vec(xs, t[..nx].to_vec());
            let g = &t[nx..nx + 3];
            let bt = &t[nx + 3..];
            let (y, _) = batch_norm_train(&xt, g, bt, 1e-5);
            y.data().iter().zip(wvec.iter()).map(|(a, b)| a * b).sum()
        };
        let numeric = numeric_grad(f, &theta, 1e-5);

        let (_, cache) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        let dy = Tensor::from_vec(y0.shape(), wvec);
        let (dx, dg, db) = batch_norm_train_backward(&dy, &gamma, &cache);
        let analytic: Vec<f64> = dx
            .data()
            .iter()
            .chain(dg.iter())
            .chain(db.iter())
            .cloned()
            .collect();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn bn_running_stats_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, [2, 2, 3, 3]);
        let (_, cache) = batch_norm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        let mut rmean = vec![0.0f64; 2];
        let mut rvar = vec![1.0f64; 2];
        update_running_stats(&mut rmean, &mut rvar, &cache, 0.1);
        for ch in 0..2 {
            assert_relative_eq!(rmean[ch], 0.1 * cache.mean[ch], max_relative = 1e-12);
            assert_relative_eq!(rvar[ch], 0.9 + 0.1 * cache.var[ch], max_relative = 1e-12);
        }
        // eval mode with the batch stats reproduces train-mode output
        let (y_train, cache) = batch_norm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        let y_eval = batch_norm_eval(&x, &[1.0, 1.0], &[0.0, 0.0], &cache.mean, &cache.var, 1e-5);
        for (a, b) in y_train.data().iter().zip(y_eval.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_maxima_and_routes_gradient() {
        let x = Tensor::<f64>::from_vec(
            [1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 6.0, //
                3.0, 4.0, 8.0, 7.0, //
                9.0, 1.0, 1.0, 2.0, //
                2.0, 8.0, 4.0, 3.0,
            ],
        );
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 8.0, 9.0, 4.0]);
        let dy = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let dx = max_pool2_backward([1, 1, 4, 4], &arg, &dy);
        let mut expect = vec![0.0; 16];
        expect[5] = 1.0; // 4.0 at (1,1)
        expect[6] = 2.0; // 8.0 at (1,2)
        expect[8] = 3.0; // 9.0 at (2,0)
        expect[14] = 4.0; // 4.0 at (3,2)
        assert_eq!(dx.data(), &expect[..]);
    }

    #[test]
    fn max_pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = randn(&mut rng, [2, 2, 4, 4]);
        let (y0, arg) = max_pool2(&x).unwrap();
        let wvec: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs = x.shape();
        let f = |t: &[f64]| {
            let xt = Tensor::from_vec(xs, t.to_vec());
            let (y, _) = max_pool2(&xt).unwrap();
            y.data().iter().zip(wvec.iter()).map(|(a, b)| a * b).sum()
        };
        let numeric = numeric_grad(f, x.data(), 1e-6);
        let dy = Tensor::from_vec(y0.shape(), wvec);
        let dx = max_pool2_backward(xs, &arg, &dy);
        let err = max_rel_err(dx.data(), &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn adaptive_pool_bin1_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, [2, 3, 6, 6]);
        let y = adaptive_avg_pool(&x, 1).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut mean = 0.0;
                for yy in 0..6 {
                    for xx in 0..6 {
                        mean += x.at(b, c, yy, xx);
                    }
                }
                mean /= 36.0;
                assert_relative_eq!(y.at(b, c, 0, 0), mean, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_pool_constant_stays_constant() {
        let x = Tensor::<f64>::full([1, 2, 12, 12], 3.25);
        for bins in [1, 2, 3, 4, 6] {
            let y = adaptive_avg_pool(&x, bins).unwrap();
            for &v in y.data() {
                assert_relative_eq!(v, 3.25);
            }
        }
    }

    #[test]
    fn adaptive_pool_matches_cell_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = randn(&mut rng, [1, 2, 12, 12]);
        let y = adaptive_avg_pool(&x, 3).unwrap();
        for c in 0..2 {
            for by in 0..3 {
                for bx in 0..3 {
                    let mut mean = 0.0;
                    for yy in by * 4..(by + 1) * 4 {
                        for xx in bx * 4..(bx + 1) * 4 {
                            mean += x.at(0, c, yy, xx);
                        }
                    }
                    mean /= 16.0;
                    assert_relative_eq!(y.at(0, c, by, bx), mean, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_rejects_indivisible() {
        let x = Tensor::<f64>::zeros([1, 1, 10, 10]);
        assert!(matches!(
            adaptive_avg_pool(&x, 3),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn adaptive_pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, [1, 2, 6, 6]);
        let y0 = adaptive_avg_pool(&x, 2).unwrap();
        let wvec: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs = x.shape();
        let f = |t: &[f64]| {
            let xt = Tensor::from_vec(xs, t.to_vec());
            let y = adaptive_avg_pool(&xt, 2).unwrap();
            y.data().iter().zip(wvec.iter()).map(|(a, b)| a * b).sum()
        };
        let numeric = numeric_grad(f, x.data(), 1e-5);
        let dy = Tensor::from_vec(y0.shape(), wvec);
        let dx = adaptive_avg_pool_backward(xs, &dy);
        assert!(max_rel_err(dx.data(), &numeric) < 1e-6);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = Tensor::<f64>::full([1, 2, 3, 3], -1.5);
        let y = bilinear_upsample(&x, 7, 11);
        for &v in y.data() {
            assert_relative_eq!(v, -1.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn bilinear_from_single_pixel_replicates() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![4.25]);
        let y = bilinear_upsample(&x, 5, 3);
        assert_eq!(y.shape(), [1, 1, 5, 3]);
        for &v in y.data() {
            assert_relative_eq!(v, 4.25);
        }
    }

    #[test]
    fn bilinear_2x2_to_4x4_interpolation_table() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_upsample(&x, 4, 4);
        // 1-D half-pixel weights for 2→4: [1,0], [3/4,1/4], [1/4,3/4], [0,1]
        let w1 = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for oy in 0..4 {
            for ox in 0..4 {
                let (wy0, wy1) = w1[oy];
                let (wx0, wx1) = w1[ox];
                let expect = wy0 * (wx0 * 0.0 + wx1 * 1.0) + wy1 * (wx0 * 2.0 + wx1 * 3.0);
                assert_relative_eq!(y.at(0, 0, oy, ox), expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = randn(&mut rng, [1, 2, 3, 4]);
        let y0 = bilinear_upsample(&x, 7, 9);
        let wvec: Vec<f64> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs = x.shape();
        let f = |t: &[f64]| {
            let xt = Tensor::from_vec(xs, t.to_vec());
            let y = bilinear_upsample(&xt, 7, 9);
            y.data().iter().zip(wvec.iter()).map(|(a, b)| a * b).sum()
        };
        let numeric = numeric_grad(f, x.data(), 1e-5);
        let dy = Tensor::from_vec(y0.shape(), wvec);
        let dx = bilinear_upsample_backward(xs, &dy);
        assert!(max_rel_err(dx.data(), &numeric) < 1e-6);
    }

    #[test]
    fn relu_gradient_masks() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![-1.0, 2.0, -3.0, 4.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 2.0, 0.0, 4.0]);
        let dy = Tensor::from_vec([1, 1, 1, 4], vec![5.0, 6.0, 7.0, 8.0]);
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx.data(), &[0.0, 6.0, 0.0, 8.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = randn(&mut rng, [2, 3, 4, 4]);
        let b = randn(&mut rng, [2, 1, 4, 4]);
        let c = randn(&mut rng, [2, 2, 4, 4]);
        let cat = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(cat.shape(), [2, 6, 4, 4]);
        assert_eq!(cat.at(0, 0, 1, 1), a.at(0, 0, 1, 1));
        assert_eq!(cat.at(0, 3, 2, 2), b.at(0, 0, 2, 2));
        assert_eq!(cat.at(1, 5, 3, 0), c.at(1, 1, 3, 0));
        let parts = split_channels(&cat, &[3, 1, 2]);
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
        assert_eq!(parts[2].data(), c.data());
    }
}
