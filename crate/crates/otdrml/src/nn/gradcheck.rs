//! Central finite-difference gradient checking.

/// Central-difference gradient of `f` at `params`: (f(p+h·eᵢ) − f(p−h·eᵢ)) / 2h
/// per coordinate. `params` is restored after each probe.
pub fn numeric_gradient<F>(mut f: F, params: &mut [f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let plus = f(params);
        params[i] = orig - h;
        let minus = f(params);
        params[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients. The
/// denominator is floored at 1e-3 so that finite-difference round-off on
/// near-zero components reads as an absolute (≈1e-7) criterion rather than
/// a meaningless relative one.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
