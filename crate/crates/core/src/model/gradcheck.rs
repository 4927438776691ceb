//! Central-difference gradients for validating the analytic backward pass.
//!
//! Deliberately built only on scalar loss evaluations, so it shares no code
//! path with the hand-written backward it is used to check.

/// Central finite-difference gradient of `f` at `theta` with step `h`.
pub fn central_diff_grad<L>(mut f: L, theta: &[f64], h: f64) -> Vec<f64>
where
    L: FnMut(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradients, guarded against the ~1e-11 noise
/// floor of central differences on O(1) losses.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_an_analytic_polynomial_gradient() {
        // f(x, y) = x^2 y + 3y
        let f = |t: &[f64]| t[0] * t[0] * t[1] + 3.0 * t[1];
        let theta = [1.5, -2.0];
        let fd = central_diff_grad(f, &theta, 1e-5);
        let exact = [2.0 * theta[0] * theta[1], theta[0] * theta[0] + 3.0];
        assert!(max_relative_error(&exact, &fd) < 1e-9);
    }
}
