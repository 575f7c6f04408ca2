//! Central finite-difference oracle for gradient verification.
//!
//! Deliberately independent of the backward pass: it only re-evaluates a
//! forward closure at perturbed inputs.

/// d f / d theta_i by central differences at step h, one entry at a time.
pub fn finite_diff_grad<F>(theta: &[f64], mut f: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Finite differences for f32-backed parameters evaluated through an f64
/// forward. The perturbed values are quantized to the f32 grid before
/// evaluation and the divisor uses the deltas actually achieved, so the
/// estimate is unaffected by storage precision.
pub fn finite_diff_grad_quantized<F>(theta: &[f64], mut f: F, h: f64) -> Vec<f64>
where
    F: FnMut(usize, f64) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    for (i, &orig) in theta.iter().enumerate() {
        let plus = ((orig + h) as f32) as f64;
        let minus = ((orig - h) as f32) as f64;
        let up = f(i, plus);
        let down = f(i, minus);
        grad[i] = (up - down) / (plus - minus);
    }
    grad
}

/// Normwise relative error: max |a - b| / max(max |a|, max |b|, floor).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_diff = max_diff.max((a - n).abs());
        max_mag = max_mag.max(a.abs()).max(n.abs());
    }
    max_diff / max_mag.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_on_quadratic() {
        let theta = vec![1.0, -2.0, 0.5];
        let grad = finite_diff_grad(&theta, |t| t.iter().map(|x| x * x).sum(), 1e-5);
        for (g, t) in grad.iter().zip(&theta) {
            assert!((g - 2.0 * t).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_err_is_scale_invariant() {
        let a = vec![1000.0, 2000.0];
        let b = vec![1000.001, 2000.0];
        assert!(max_rel_err(&a, &b) < 1e-5);
    }
}
