//! Scalar losses. Batch aggregation (means, masking) lives in the model.

/// Clamp bound keeping `ln` finite in the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy −[y·ln p + (1−y)·ln(1−p)] with p clamped to
/// [ε, 1−ε].
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d bce / d p — the exact gradient of the clamped forward: zero where the
/// clamp is active, (p−y)/(p(1−p)) inside.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    (p - y) / (p * (1.0 - p))
}

/// Mean squared error over aligned slices; 0 for empty input.
pub fn mse(prediction: &[f64], target: &[f64]) -> f64 {
    assert_eq!(prediction.len(), target.len(), "mse length mismatch");
    if prediction.is_empty() {
        return 0.0;
    }
    let sum: f64 = prediction.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    sum / prediction.len() as f64
}

/// d mse / d prediction_i = 2(p_i − t_i)/n.
pub fn mse_grad(prediction: &[f64], target: &[f64]) -> Vec<f64> {
    assert_eq!(prediction.len(), target.len(), "mse length mismatch");
    let n = prediction.len().max(1) as f64;
    prediction.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect()
}
