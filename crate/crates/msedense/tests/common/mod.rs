//! Shared helpers for the integration suites: a central-difference
//! gradient oracle, seeded value generators, and the gradient checks
//! themselves.

pub mod grad;

use msedense::rng;
use rand::Rng;

/// Central-difference gradient of a scalar function at `x`. The step is
/// scaled by each coordinate's magnitude so large and small parameters
/// see comparable relative perturbations.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Worst disagreement between analytic and numeric gradients, as
/// `|a - n| / max(|a|, |n|, 1)`: relative for large entries, absolute
/// near zero where the relative form would amplify finite-difference
/// noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// `n` values in `(-1.1, 1.1)` from a seeded stream, kept at least 0.1
/// away from zero so ReLU kinks and division guards are not sampled on
/// their non-differentiable points.
pub fn seeded_values(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            v + 0.1 * if v < 0.0 { -1.0 } else { 1.0 }
        })
        .collect()
}
