//! Central finite-difference utilities for gradient certification.
//!
//! Public so integration suites can certify the full model; the per-layer
//! unit tests use the same helpers.

/// Full numeric gradient of `f` at `x` by central differences.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut theta = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let fp = f(&theta);
        theta[i] = orig - step;
        let fm = f(&theta);
        theta[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Numeric gradient restricted to the given coordinates; entries come back
/// in the same order as `coords`.
pub fn numeric_grad_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut theta = x.to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + step;
        let fp = f(&theta);
        theta[i] = orig - step;
        let fm = f(&theta);
        theta[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Worst elementwise deviation between two gradients, relative to the larger
/// of the two infinity norms (with a small floor so all-zero pairs compare
/// equal instead of dividing by zero).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let norm = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-8);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
        / norm
}
