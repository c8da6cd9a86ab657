//! Convergence diagnostics.

/// Split-chain potential scale reduction of a single chain: the chain is cut
/// into two halves that are treated as separate chains. Returns `NaN` for
/// chains shorter than four draws and `1.0` when both halves are constant and
/// equal.
pub fn split_rhat(chain: &[f64]) -> f64 {
    let half = chain.len() / 2;
    if half < 2 {
        return f64::NAN;
    }
    let parts = [&chain[..half], &chain[chain.len() - half..]];
    let m = half as f64;
    let means: Vec<f64> = parts.iter().map(|c| c.iter().sum::<f64>() / m).collect();
    let vars: Vec<f64> = parts
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0))
        .collect();
    let w = 0.5 * (vars[0] + vars[1]);
    let grand = 0.5 * (means[0] + means[1]);
    let b = m * ((means[0] - grand).powi(2) + (means[1] - grand).powi(2));
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (m - 1.0) / m * w + b / m;
    (var_plus / w).sqrt()
}
