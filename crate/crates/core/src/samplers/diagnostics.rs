//! Monte Carlo error estimates for correlated chains.

/// Standard error of the mean of `xs` by non-overlapping batch means.
///
/// Falls back to the iid formula when there are fewer than two full
/// batches.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let size = if n_batches > 0 { n / n_batches } else { 0 };
    if n_batches < 2 || size < 2 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        return (var / n as f64).sqrt();
    }
    let means: Vec<f64> = xs
        .chunks_exact(size)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let var_batch =
        means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() as f64 - 1.0);
    (var_batch / means.len() as f64).sqrt()
}

/// Sample mean and unbiased variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}
