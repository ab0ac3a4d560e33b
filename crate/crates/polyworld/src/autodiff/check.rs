//! Gradient verification utilities.
//!
//! Central finite differences over the forward (value) path only, so checks
//! stay independent of the backward implementation they validate.

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let hi = f(&buf);
        buf[i] = orig - eps;
        let lo = f(&buf);
        buf[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between two gradients: `|a-n| / max(|a|, |n|)`,
/// with an absolute floor of 1e-7 so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if diff <= 1e-7 {
            continue;
        }
        let scale = a.abs().max(n.abs());
        worst = worst.max(diff / scale);
    }
    worst
}

/// Panic unless the two gradients agree within `rtol`.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rtol: f64) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        if diff <= 1e-7 {
            continue;
        }
        let scale = a.abs().max(n.abs());
        assert!(
            diff / scale <= rtol,
            "gradient mismatch at {i}: analytic={a}, numeric={n}, rel_err={}",
            diff / scale
        );
    }
}
