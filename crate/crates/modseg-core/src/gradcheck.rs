//! Central finite-difference gradient verification.
//!
//! The checker only ever calls the loss forward, so it stays independent of
//! the analytic gradient path it is used to validate.

use crate::scalar::Scalar;

/// Central finite differences of `f` at `x`, one component at a time.
pub fn central_diff<T, F>(mut f: F, x: &[T], step: f64) -> Vec<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let h = T::c(step);
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (T::c(2.0) * h));
    }
    grad
}

/// Worst per-component relative error between an analytic and a numeric
/// gradient. Components are measured against their own magnitude, floored at
/// one thousandth of the largest component so ~zero entries of a healthy
/// gradient don't dominate.
pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = (scale * 1e-3).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_quadratic_gradient() {
        // f(x) = Σ i·x_i², ∇f = 2·i·x_i.
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| i as f64 * v * v).sum();
        let x = [0.3, -0.7, 1.2, 0.05];
        let num = central_diff(f, &x, 1e-5);
        let ana: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * i as f64 * v).collect();
        assert!(max_rel_err(&ana, &num) <= 1e-9);
    }

    #[test]
    fn flags_wrong_gradient() {
        let ana = [1.0, 2.0];
        let num = [1.0, 2.5];
        assert!(max_rel_err(&ana, &num) > 0.1);
    }
}
