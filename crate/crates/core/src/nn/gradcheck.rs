//! Self-contained gradient certification: every layer's analytic backward
//! pass against f64 central finite differences, plus an end-to-end check of
//! the assembled network. Backs the grad-check command and the release gate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fd::{max_rel_err, numeric_grad};
use super::model::{build_model, ModelConfig};
use super::ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_train, batch_norm_train_backward,
    bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward, max_pool2,
    max_pool2_backward, relu, relu_backward, transposed_conv2d, transposed_conv2d_backward,
};
use super::tensor::Tensor;
use crate::losses::Loss;

pub const FD_STEP: f64 = 1e-5;
/// Per-layer pass bar for f64 central differences.
pub const LAYER_TOL: f64 = 1e-6;
/// End-to-end bar; the long chain compounds rounding.
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < LAYER_TOL
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Values bounded away from zero, for kinked activations.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    rand_vec(rng, n)
        .into_iter()
        .map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v })
        .collect()
}

fn weighted_sum(y: &Tensor<f64>, c: &[f64]) -> f64 {
    y.data().iter().zip(c.iter()).map(|(a, b)| a * b).sum()
}

fn dy_from(c: &[f64], shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_vec(shape, c.to_vec())
}

fn conv_check(rng: &mut ChaCha8Rng) -> f64 {
    let (xs, ks) = ([2, 3, 6, 7], [4, 3, 3, 3]);
    let (nx, nk, nb) = (252, 108, 4);
    let theta: Vec<f64> = rand_vec(rng, nx + nk + nb);
    let y = conv2d(
        &Tensor::from_vec(xs, theta[..nx].to_vec()),
        &Tensor::from_vec(ks, theta[nx..nx + nk].to_vec()),
        Some(&theta[nx + nk..]),
        2,
        1,
    )
    .unwrap();
    let c = rand_vec(rng, y.numel());
    let f = |t: &[f64]| {
        let y = conv2d(
            &Tensor::from_vec(xs, t[..nx].to_vec()),
            &Tensor::from_vec(ks, t[nx..nx + nk].to_vec()),
            Some(&t[nx + nk..]),
            2,
            1,
        )
        .unwrap();
        weighted_sum(&y, &c)
    };
    let (dx, dk, db) = conv2d_backward(
        &Tensor::from_vec(xs, theta[..nx].to_vec()),
        &Tensor::from_vec(ks, theta[nx..nx + nk].to_vec()),
        &dy_from(&c, y.shape()),
        2,
        1,
    )
    .unwrap();
    let mut analytic = dx.data().to_vec();
    analytic.extend_from_slice(dk.data());
    analytic.extend_from_slice(&db);
    max_rel_err(&analytic, &numeric_grad(f, &theta, FD_STEP))
}

fn tconv_check(rng: &mut ChaCha8Rng) -> f64 {
    let (xs, ks) = ([2, 3, 4, 5], [3, 2, 3, 3]);
    let (nx, nk, nb) = (120, 54, 2);
    let theta: Vec<f64> = rand_vec(rng, nx + nk + nb);
    let y = transposed_conv2d(
        &Tensor::from_vec(xs, theta[..nx].to_vec()),
        &Tensor::from_vec(ks, theta[nx..nx + nk].to_vec()),
        Some(&theta[nx + nk..]),
        2,
        1,
    )
    .unwrap();
    let c = rand_vec(rng, y.numel());
    let f = |t: &[f64]| {
        let y = transposed_conv2d(
            &Tensor::from_vec(xs, t[..nx].to_vec()),
            &Tensor::from_vec(ks, t[nx..nx + nk].to_vec()),
            Some(&t[nx + nk..]),
            2,
            1,
        )
        .unwrap();
        weighted_sum(&y, &c)
    };
    let (dx, dk, db) = transposed_conv2d_backward(
        &Tensor::from_vec(xs, theta[..nx].to_vec()),
        &Tensor::from_vec(ks, theta[nx..nx + nk].to_vec()),
        &dy_from(&c, y.shape()),
        2,
        1,
    )
    .unwrap();
    let mut analytic = dx.data().to_vec();
    analytic.extend_from_slice(dk.data());
    analytic.extend_from_slice(&db);
    max_rel_err(&analytic, &numeric_grad(f, &theta, FD_STEP))
}

fn bn_check(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [2, 3, 4, 5];
    let (nx, nc) = (120, 3);
    let mut theta = rand_vec(rng, nx + 2 * nc);
    for g in &mut theta[nx..nx + nc] {
        *g = 0.5 + g.abs(); // gamma away from zero
    }
    let eps = super::model::BN_EPS;
    let run = |t: &[f64]| {
        batch_norm_train(
            &Tensor::from_vec(xs, t[..nx].to_vec()),
            &t[nx..nx + nc],
            &t[nx + nc..],
            eps,
        )
    };
    let (y0, cache) = run(&theta);
    let c = rand_vec(rng, y0.numel());
    let f = |t: &[f64]| weighted_sum(&run(t).0, &c);
    let (dx, dgamma, dbeta) =
        batch_norm_train_backward(&dy_from(&c, y0.shape()), &theta[nx..nx + nc], &cache);
    let mut analytic = dx.data().to_vec();
    analytic.extend_from_slice(&dgamma);
    analytic.extend_from_slice(&dbeta);
    max_rel_err(&analytic, &numeric_grad(f, &theta, FD_STEP))
}

fn relu_check(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [2, 3, 4, 4];
    let theta = rand_vec_off_zero(rng, 96);
    let y0 = relu(&Tensor::from_vec(xs, theta.clone()));
    let c = rand_vec(rng, y0.numel());
    let f = |t: &[f64]| weighted_sum(&relu(&Tensor::from_vec(xs, t.to_vec())), &c);
    let analytic = relu_backward(&y0, &dy_from(&c, xs));
    max_rel_err(analytic.data(), &numeric_grad(f, &theta, FD_STEP))
}

fn max_pool_check(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [2, 2, 6, 6];
    let theta = rand_vec(rng, 144);
    let (y0, argmax) = max_pool2(&Tensor::from_vec(xs, theta.clone())).unwrap();
    let c = rand_vec(rng, y0.numel());
    let f = |t: &[f64]| {
        let (y, _) = max_pool2(&Tensor::from_vec(xs, t.to_vec())).unwrap();
        weighted_sum(&y, &c)
    };
    let analytic = max_pool2_backward(xs, &argmax, &dy_from(&c, y0.shape()));
    max_rel_err(analytic.data(), &numeric_grad(f, &theta, FD_STEP))
}

fn adaptive_pool_check(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [1, 2, 6, 6];
    let theta = rand_vec(rng, 72);
    let y0 = adaptive_avg_pool(&Tensor::from_vec(xs, theta.clone()), 3).unwrap();
    let c = rand_vec(rng, y0.numel());
    let f = |t: &[f64]| {
        weighted_sum(
            &adaptive_avg_pool(&Tensor::from_vec(xs, t.to_vec()), 3).unwrap(),
            &c,
        )
    };
    let analytic = adaptive_avg_pool_backward(xs, &dy_from(&c, y0.shape()));
    max_rel_err(analytic.data(), &numeric_grad(f, &theta, FD_STEP))
}

fn bilinear_check(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [1, 2, 3, 4];
    let theta = rand_vec(rng, 24);
    let y0 = bilinear_upsample(&Tensor::from_vec(xs, theta.clone()), 6, 8);
    let c = rand_vec(rng, y0.numel());
    let f = |t: &[f64]| {
        weighted_sum(&bilinear_upsample(&Tensor::from_vec(xs, t.to_vec()), 6, 8), &c)
    };
    let analytic = bilinear_upsample_backward(xs, &dy_from(&c, y0.shape()));
    max_rel_err(analytic.data(), &numeric_grad(f, &theta, FD_STEP))
}

fn loss_check(rng: &mut ChaCha8Rng, loss: Loss) -> f64 {
    let shape = [2, 1, 4, 4];
    // probabilities well inside the clamp band, so the loss is smooth
    let theta: Vec<f64> = (0..32).map(|_| rng.gen_range(0.05..=0.95)).collect();
    let target: Vec<f64> = (0..32)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
        .collect();
    let g = Tensor::from_vec(shape, target);
    let f = |t: &[f64]| loss.on_probs(&Tensor::from_vec(shape, t.to_vec()), &g).0;
    let (_, dp) = loss.on_probs(&Tensor::from_vec(shape, theta.clone()), &g);
    max_rel_err(dp.data(), &numeric_grad(f, &theta, FD_STEP))
}

/// Every layer and loss against central differences. Deterministic per seed.
pub fn check_layers(seed: u64) -> Vec<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = Loss::Focal {
        alpha: 0.25,
        gamma: 2.0,
    };
    let focal_flat = Loss::Focal {
        alpha: 1.0,
        gamma: 0.0,
    };
    vec![
        LayerCheck {
            name: "conv2d",
            max_rel_err: conv_check(&mut rng),
        },
        LayerCheck {
            name: "transposed_conv2d",
            max_rel_err: tconv_check(&mut rng),
        },
        LayerCheck {
            name: "batch_norm",
            max_rel_err: bn_check(&mut rng),
        },
        LayerCheck {
            name: "relu",
            max_rel_err: relu_check(&mut rng),
        },
        LayerCheck {
            name: "max_pool2",
            max_rel_err: max_pool_check(&mut rng),
        },
        LayerCheck {
            name: "adaptive_avg_pool",
            max_rel_err: adaptive_pool_check(&mut rng),
        },
        LayerCheck {
            name: "bilinear_upsample",
            max_rel_err: bilinear_check(&mut rng),
        },
        LayerCheck {
            name: "loss_bce",
            max_rel_err: loss_check(&mut rng, Loss::Bce),
        },
        LayerCheck {
            name: "loss_focal",
            max_rel_err: loss_check(&mut rng, focal),
        },
        LayerCheck {
            name: "loss_focal_flat",
            max_rel_err: loss_check(&mut rng, focal_flat),
        },
        LayerCheck {
            name: "loss_dice",
            max_rel_err: loss_check(&mut rng, Loss::Dice { eps: 1.0 }),
        },
        LayerCheck {
            name: "loss_bce_dice",
            max_rel_err: loss_check(&mut rng, Loss::BceDice),
        },
    ]
}

/// Forward/backward one-sided slopes this far apart mean an activation
/// boundary (relu sign, pool argmax) lies inside the step, where central
/// differences certify nothing. Smooth coordinates stay below ~2e-5.
const KINK_SPLIT: f64 = 1e-4;

/// End-to-end check of the assembled network (pyramid branches included):
/// analytic parameter gradients against finite differences at sampled
/// coordinates of every trainable tensor. A coordinate whose one-sided
/// slopes disagree is skipped in favor of a neighbor; the filter reads only
/// function values, so it cannot hide a wrong gradient.
pub fn check_model(seed: u64) -> f64 {
    let cfg = ModelConfig {
        in_channels: 3,
        base_width: 4,
        encoder_stages: 2,
        blocks_per_stage: 1,
        pp_bins: vec![1, 2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f64656c);
    let mut model = build_model::<f64>(&cfg, seed).unwrap();
    let x = Tensor::from_vec([1, 3, 16, 16], rand_vec(&mut rng, 768));
    let (logits, cache) = model.forward_train(&x).unwrap();
    let c = rand_vec(&mut rng, logits.numel());
    let f0 = weighted_sum(&logits, &c);

    model.zero_grads();
    model.backward(&cache, &dy_from(&c, logits.shape()));
    let analytic_by_param: Vec<Option<Vec<f64>>> = model
        .params()
        .iter()
        .map(|p| {
            if p.trainable {
                Some(p.value.grad().map(|g| g.to_vec()).unwrap_or_default())
            } else {
                None
            }
        })
        .collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (pi, grads) in analytic_by_param.iter().enumerate() {
        let Some(grads) = grads else { continue };
        let numel = model.params()[pi].value.numel();
        let stride = (numel / 4).max(1);
        for start in (0..numel).step_by(stride).take(4) {
            for attempt in 0..8 {
                let ci = (start + attempt) % numel;
                let orig = model.params()[pi].value.data()[ci];
                model.params_mut()[pi].value.data_mut()[ci] = orig + FD_STEP;
                let fp = weighted_sum(&model.forward_train(&x).unwrap().0, &c);
                model.params_mut()[pi].value.data_mut()[ci] = orig - FD_STEP;
                let fm = weighted_sum(&model.forward_train(&x).unwrap().0, &c);
                model.params_mut()[pi].value.data_mut()[ci] = orig;
                let fwd = (fp - f0) / FD_STEP;
                let bwd = (f0 - fm) / FD_STEP;
                if (fwd - bwd).abs() > KINK_SPLIT * (fwd.abs() + bwd.abs() + 1.0) {
                    continue;
                }
                analytic.push(grads[ci]);
                numeric.push((fp - fm) / (2.0 * FD_STEP));
                break;
            }
        }
    }
    max_rel_err(&analytic, &numeric)
}
