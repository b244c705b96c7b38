//! Rank correlation and paired two-sample tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    super::pearson(&ranks(a), &ranks(b))
}

/// Two-sided paired t-test p-value on `a - b` with the exact Student-t
/// distribution. `None` when every difference is zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    if n < 2 || a.len() != b.len() {
        return None;
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if mean == 0.0 { None } else { Some(0.0) };
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    Some((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Exact null distribution of twice the signed-rank statistic: entry `w`
/// counts sign assignments whose positive doubled-rank sum is `w`.
pub fn wilcoxon_exact_distribution(doubled_ranks: &[usize]) -> Vec<f64> {
    let total: usize = doubled_ranks.iter().sum();
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled_ranks {
        for w in (0..=reach).rev() {
            if counts[w] != 0.0 {
                counts[w + r] += counts[w];
            }
        }
        reach += r;
    }
    counts
}

/// Largest sample size handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank p-value on `a - b`. Zero differences are
/// dropped; `None` when nothing remains. Exact for up to 25 nonzero
/// differences, normal approximation with tie and continuity correction
/// above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return None;
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let r = ranks(&abs);
    let w_plus: f64 = d.iter().zip(&r).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = r.iter().map(|x| (2.0 * x).round() as usize).collect();
        let counts = wilcoxon_exact_distribution(&doubled);
        let total: f64 = counts.iter().sum();
        let obs = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=obs].iter().sum::<f64>() / total;
        let upper: f64 = counts[obs..].iter().sum::<f64>() / total;
        return Some((2.0 * lower.min(upper)).min(1.0));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return None;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Some((2.0 * normal.cdf(-z)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub spearman_rho: Option<f64>,
    pub paired_t_p: Option<f64>,
    pub wilcoxon_p: Option<f64>,
}

pub fn summary_stats(a: &[f64], b: &[f64]) -> Result<SummaryStats> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "paired statistics need two equal-length samples of size >= 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(SummaryStats {
        spearman_rho: spearman(a, b),
        paired_t_p: paired_t_test(a, b),
        wilcoxon_p: wilcoxon_signed_rank(a, b),
    })
}
