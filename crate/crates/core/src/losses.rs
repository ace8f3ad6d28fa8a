//! Segmentation losses on per-pixel foreground probabilities.
//!
//! Every loss takes probabilities in [0, 1] (clamped internally to
//! [1e-7, 1 − 1e-7] before any log) and a {0, 1} target of the same shape,
//! and returns the scalar loss together with its gradient w.r.t. the
//! probabilities. [`Loss::on_logits`] chains through the sigmoid.

use serde::{Deserialize, Serialize};

use crate::nn::{s, Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// Loss selector. `BceDice` is the unit-weight sum of `Bce` and `Dice`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    Bce,
    Focal {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    Dice {
        #[serde(default = "default_dice_eps")]
        eps: f64,
    },
    BceDice,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.5
}
fn default_dice_eps() -> f64 {
    1.0
}

impl Default for Loss {
    fn default() -> Self {
        Loss::BceDice
    }
}

/// Clamped probability and whether the clamp was inactive (gradient passes).
#[inline]
fn clamp<T: Scalar>(p: T) -> (T, bool) {
    let lo: T = s(PROB_CLAMP);
    let hi: T = s(1.0 - PROB_CLAMP);
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Mean binary cross-entropy over all pixels.
pub fn bce<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> (T, Tensor<T>) {
    assert_eq!(p.shape(), g.shape(), "loss shape mismatch");
    let n = p.numel();
    assert!(n > 0, "empty loss input");
    let inv_n = T::one() / s::<T>(n as f64);
    let mut grad = Tensor::zeros(p.shape());
    let mut total = T::zero();
    for i in 0..n {
        let (pc, pass) = clamp(p.data()[i]);
        let gi = g.data()[i];
        total = total - (gi * pc.ln() + (T::one() - gi) * (T::one() - pc).ln());
        if pass {
            grad.data_mut()[i] =
                (-(gi / pc) + (T::one() - gi) / (T::one() - pc)) * inv_n;
        }
    }
    (total * inv_n, grad)
}

/// Mean focal loss: −α (1 − p_t)^γ ln p_t with p_t = p for foreground and
/// 1 − p for background; α is one scalar applied to every pixel.
pub fn focal<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, alpha: f64, gamma: f64) -> (T, Tensor<T>) {
    assert_eq!(p.shape(), g.shape(), "loss shape mismatch");
    let n = p.numel();
    assert!(n > 0, "empty loss input");
    let inv_n = T::one() / s::<T>(n as f64);
    let a: T = s(alpha);
    let gam: T = s(gamma);
    let mut grad = Tensor::zeros(p.shape());
    let mut total = T::zero();
    for i in 0..n {
        let (pc, pass) = clamp(p.data()[i]);
        let gi = g.data()[i];
        let fg = gi > s(0.5);
        let pt = if fg { pc } else { T::one() - pc };
        let one_m = T::one() - pt;
        let w = if gamma == 0.0 { T::one() } else { one_m.powf(gam) };
        total = total - a * w * pt.ln();
        if pass {
            // d/dp_t of −α(1−p_t)^γ ln p_t, then ±1 for the g branch
            let dpt = if gamma == 0.0 {
                -a / pt
            } else {
                a * gam * one_m.powf(gam - T::one()) * pt.ln() - a * w / pt
            };
            grad.data_mut()[i] = (if fg { dpt } else { -dpt }) * inv_n;
        }
    }
    (total * inv_n, grad)
}

/// Soft dice loss, computed per image over all its pixels and averaged over
/// the batch: 1 − (2Σpg + ε) / (Σp² + Σg² + ε). No log, so no clamp: p = g
/// gives exactly zero, binary inputs included.
pub fn dice<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, eps: f64) -> (T, Tensor<T>) {
    assert_eq!(p.shape(), g.shape(), "loss shape mismatch");
    let [n, c, h, w] = p.shape();
    let per = c * h * w;
    assert!(n > 0 && per > 0, "empty loss input");
    let e: T = s(eps);
    let inv_b = T::one() / s::<T>(n as f64);
    let mut grad = Tensor::zeros(p.shape());
    let mut total = T::zero();
    for b in 0..n {
        let lo = b * per;
        let mut inter = T::zero();
        let mut pp = T::zero();
        let mut gg = T::zero();
        for i in 0..per {
            let pc = p.data()[lo + i];
            let gi = g.data()[lo + i];
            inter = inter + pc * gi;
            pp = pp + pc * pc;
            gg = gg + gi * gi;
        }
        let num = s::<T>(2.0) * inter + e;
        let den = pp + gg + e;
        total = total + (T::one() - num / den);
        for i in 0..per {
            let pc = p.data()[lo + i];
            let gi = g.data()[lo + i];
            // quotient rule on num/den, negated
            let d = (num * (s::<T>(2.0) * pc) - den * (s::<T>(2.0) * gi)) / (den * den);
            grad.data_mut()[lo + i] = d * inv_b;
        }
    }
    (total * inv_b, grad)
}

impl Loss {
    /// Loss and gradient w.r.t. the probabilities.
    pub fn on_probs<T: Scalar>(&self, p: &Tensor<T>, g: &Tensor<T>) -> (T, Tensor<T>) {
        match *self {
            Loss::Bce => bce(p, g),
            Loss::Focal { alpha, gamma } => focal(p, g, alpha, gamma),
            Loss::Dice { eps } => dice(p, g, eps),
            Loss::BceDice => {
                let (lb, gb) = bce(p, g);
                let (ld, gd) = dice(p, g, default_dice_eps());
                let mut grad = gb;
                for (a, b) in grad.data_mut().iter_mut().zip(gd.data().iter()) {
                    *a = *a + *b;
                }
                (lb + ld, grad)
            }
        }
    }

    /// Loss and gradient w.r.t. the logits (sigmoid applied internally).
    pub fn on_logits<T: Scalar>(&self, z: &Tensor<T>, g: &Tensor<T>) -> (T, Tensor<T>) {
        let p = sigmoid(z);
        let (loss, dp) = self.on_probs(&p, g);
        let mut dz = dp;
        for (d, &pi) in dz.data_mut().iter_mut().zip(p.data().iter()) {
            *d = *d * pi * (T::one() - pi);
        }
        (loss, dz)
    }
}

pub fn sigmoid<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| T::one() / (T::one() + (-v).exp()))
}
