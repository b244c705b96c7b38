//! Latent recovery metrics, leave-one-channel-out prediction, power
//! rotation, ridge decoding and paired statistics.

mod loco;
mod ridge;
mod stats;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::{GibbsState, PosteriorSamples};

pub use loco::{loco_predict, loco_predict_state, loco_report, posterior_fit, LocoReport};
pub use ridge::{ridge_decode, ridge_fit, RidgeResult};
pub use stats::{
    paired_t_test, spearman, summary_stats, wilcoxon_exact_distribution, wilcoxon_signed_rank,
    SummaryStats,
};

/// Orthogonal alignment of an estimate onto a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub rotation: DMatrix<f64>,
    pub aligned: DMatrix<f64>,
    pub residual_rmse: f64,
}

/// Orthogonal `R` minimizing `|R estimate - truth|_F`: the polar factor of
/// `truth * estimate^T`.
pub fn procrustes_align(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<AlignmentResult> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "estimate {:?} and truth {:?} differ in shape",
            estimate.shape(),
            truth.shape()
        )));
    }
    if estimate.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidInput("cannot align an all-zero estimate".into()));
    }
    let m = truth * estimate.transpose();
    let svd = m.svd(true, true);
    let rotation = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    let aligned = &rotation * estimate;
    let residual_rmse = rmse(&aligned, truth)?;
    Ok(AlignmentResult {
        rotation,
        aligned,
        residual_rmse,
    })
}

/// Root mean square difference over all entries.
pub fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("rmse of {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("rmse of empty matrices".into()));
    }
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

/// `rmse_a - rmse_b`; positive when method b is closer to the truth.
pub fn delta_rmse(rmse_a: f64, rmse_b: f64) -> f64 {
    rmse_a - rmse_b
}

/// Pearson correlation of two equal-length series (`None` if either is
/// constant).
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Row-wise correlations between the Procrustes-aligned estimate and the
/// truth (`NaN` for constant rows).
pub fn recovery_correlations(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    let al = procrustes_align(estimate, truth)?;
    Ok((0..truth.nrows())
        .map(|q| {
            let a: Vec<f64> = al.aligned.row(q).iter().copied().collect();
            let b: Vec<f64> = truth.row(q).iter().copied().collect();
            pearson(&a, &b).unwrap_or(f64::NAN)
        })
        .collect())
}

/// Which latent representation to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    /// The GP latents f.
    Raw,
    /// The scale-absorbed latents `exp(h) * f` (OSLMM only).
    Orthonormalized,
}

/// Posterior mean over stored samples of one trial's latents.
pub fn posterior_mean_latents(posterior: &PosteriorSamples, trial: usize, kind: LatentKind) -> Result<DMatrix<f64>> {
    let first = posterior
        .samples
        .first()
        .ok_or_else(|| Error::InvalidInput("posterior has no samples".into()))?;
    if trial >= first.latents().len() {
        return Err(Error::InvalidInput(format!("trial {trial} out of range")));
    }
    let mut acc = DMatrix::zeros(first.latents()[trial].0.nrows(), first.latents()[trial].0.ncols());
    for s in &posterior.samples {
        match (s, kind) {
            (_, LatentKind::Raw) => acc += &s.latents()[trial].0,
            (GibbsState::Oslmm(o), LatentKind::Orthonormalized) => acc += o.ortho_latents(trial).0,
            (GibbsState::Slmm(_), LatentKind::Orthonormalized) => {
                return Err(Error::InvalidInput(
                    "orthonormalized latents exist only for the orthogonal model".into(),
                ))
            }
        }
    }
    Ok(acc / posterior.samples.len() as f64)
}

/// Rotates the stacked latents so rows are mutually orthogonal with
/// non-increasing power. Each row's largest-magnitude entry is made
/// positive, which makes the operation idempotent.
pub fn rotate_latents_power(trials: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidInput("need at least one trial".into()))?;
    let q = first.nrows();
    if trials.iter().any(|m| m.nrows() != q) {
        return Err(Error::Shape("all trials need the same latent dimension".into()));
    }
    let total: usize = trials.iter().map(|m| m.ncols()).sum();
    let mut stacked = DMatrix::zeros(q, total);
    let mut col = 0;
    for m in trials {
        stacked.columns_mut(col, m.ncols()).copy_from(m);
        col += m.ncols();
    }
    let svd = stacked.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut rotation = DMatrix::zeros(q, q);
    for (i, &k) in order.iter().enumerate() {
        rotation.set_row(i, &u.column(k).transpose());
    }
    let rotated = &rotation * &stacked;
    for i in 0..q {
        let row = rotated.row(i);
        let peak = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if peak < 0.0 {
            rotation.row_mut(i).neg_mut();
        }
    }
    let out = trials.iter().map(|m| &rotation * m).collect();
    Ok((out, rotation))
}

/// Aggregate numbers written by the `eval` command. Missing values are
/// `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: Option<f64>,
    pub delta_rmse: Option<f64>,
    pub correlations: Option<Vec<f64>>,
    pub sse: Option<Vec<f64>>,
    pub r2: Option<Vec<Option<f64>>>,
    pub spearman_rho: Option<f64>,
    pub t_p_value: Option<f64>,
    pub wilcoxon_p_value: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::random_semiorthogonal;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rotation(q: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_semiorthogonal(q, q, &mut rng).unwrap().into_inner()
    }

    #[test]
    fn identity_alignment() {
        let t = gaussian(3, 20, 1);
        let a = procrustes_align(&t, &t).unwrap();
        assert!((a.rotation - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!(a.residual_rmse < 1e-12);
    }

    #[test]
    fn recovers_known_rotation() {
        let t = gaussian(3, 50, 2);
        let r = rotation(3, 3);
        let est = r.transpose() * &t;
        let a = procrustes_align(&est, &t).unwrap();
        assert!((&a.rotation - &r).amax() < 1e-8);
        assert!(a.residual_rmse < 1e-10);
        let rtr = a.rotation.transpose() * &a.rotation;
        assert!((rtr - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn permutation_with_signs_realigned() {
        let t = gaussian(3, 30, 4);
        let mut est = DMatrix::zeros(3, 30);
        est.set_row(0, &(-t.row(2)));
        est.set_row(1, &t.row(0));
        est.set_row(2, &(-t.row(1)));
        assert!(procrustes_align(&est, &t).unwrap().residual_rmse < 1e-10);
    }

    #[test]
    fn rejects_zero_estimate_and_shape_mismatch() {
        let t = gaussian(2, 5, 5);
        assert!(procrustes_align(&DMatrix::zeros(2, 5), &t).is_err());
        assert!(procrustes_align(&gaussian(3, 5, 6), &t).is_err());
    }

    #[test]
    fn rmse_hand_values() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert!((rmse(&a, &b).unwrap() - (25.0f64 / 2.0).sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(delta_rmse(0.3, 0.3), 0.0);
    }

    #[test]
    fn power_rotation_properties() {
        let trials = vec![gaussian(4, 30, 7), gaussian(4, 20, 8) * 2.0];
        let (rot, r) = rotate_latents_power(&trials).unwrap();
        let stacked = DMatrix::from_fn(4, 50, |i, j| if j < 30 { rot[0][(i, j)] } else { rot[1][(i, j - 30)] });
        let powers: Vec<f64> = (0..4).map(|i| stacked.row(i).norm_squared()).collect();
        assert!(powers.windows(2).all(|w| w[0] >= w[1]));
        let before: f64 = trials.iter().map(|m| m.norm_squared()).sum();
        assert!((powers.iter().sum::<f64>() - before).abs() < 1e-9 * before);
        let gram = &stacked * stacked.transpose();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(gram[(i, j)].abs() < 1e-8);
                }
            }
        }
        // singular value oracle
        let orig = DMatrix::from_fn(4, 50, |i, j| if j < 30 { trials[0][(i, j)] } else { trials[1][(i, j - 30)] });
        let sv = orig.svd(false, false).singular_values;
        let mut svs: Vec<f64> = sv.iter().map(|s| s * s).collect();
        svs.sort_by(|a, b| b.total_cmp(a));
        for (p, s) in powers.iter().zip(&svs) {
            assert!((p - s).abs() < 1e-8 * s.max(1.0));
        }
        assert!((r.transpose() * &r - DMatrix::identity(4, 4)).amax() < 1e-10);
        let (twice, _) = rotate_latents_power(&rot).unwrap();
        for (a, b) in twice.iter().zip(&rot) {
            assert!((a - b).amax() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn alignment_invariant_to_pre_rotation(seed in 0u64..10_000) {
            let t = gaussian(3, 25, seed);
            let e = gaussian(3, 25, seed + 1);
            let r = rotation(3, seed + 2);
            let a = procrustes_align(&e, &t).unwrap().residual_rmse;
            let b = procrustes_align(&(r * &e), &t).unwrap().residual_rmse;
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn alignment_is_optimal_against_random_rotations(seed in 0u64..10_000) {
            let t = gaussian(3, 15, seed);
            let e = gaussian(3, 15, seed + 1);
            let best = procrustes_align(&e, &t).unwrap().residual_rmse;
            for k in 0..10 {
                let r = rotation(3, seed * 31 + k);
                prop_assert!(best <= rmse(&(r * &e), &t).unwrap() + 1e-12);
            }
        }
    }
}
