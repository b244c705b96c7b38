//! Conjugate inverse-Gamma variance updates and adaptive Metropolis steps on
//! kernel length-scales.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GibbsState, HyperPriors, SamplerRng};
use crate::error::{Error, Result};
use crate::kernels::{chol_jitter, gram, CholeskyFactor, KernelParams};
use crate::model::{Dataset, NoiseModel};

/// `IG(shape, rate)`, density proportional to `x^{-shape-1} exp(-rate / x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::Numerical(format!(
                "invalid inverse-Gamma parameters ({shape}, {rate})"
            )));
        }
        Ok(Self { shape, rate })
    }

    /// Defined for `shape > 1`.
    pub fn mean(&self) -> f64 {
        self.rate / (self.shape - 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("validated parameters");
        1.0 / g.sample(rng)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - statrs::function::gamma::ln_gamma(self.shape)
            - (self.shape + 1.0) * x.ln()
            - self.rate / x
    }
}

/// Conjugate update for a variance `s2` with prior `IG(shape, rate)` given
/// series `x_i ~ N(0, s2 * K)` where `corr` factors the correlation `K`.
pub fn variance_posterior<'a, I>(series: I, corr: &CholeskyFactor, shape: f64, rate: f64) -> Result<InverseGamma>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut n = 0usize;
    let mut quad = 0.0;
    for s in series {
        n += s.len();
        quad += corr.quad_form(s);
    }
    InverseGamma::new(shape + n as f64 / 2.0, rate + quad / 2.0)
}

/// Rows of a matrix as owned vectors.
pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Draws a new noise model for the current state (homogeneous for OSLMM,
/// one variance per channel for SLMM).
pub fn sample_noise_variance(
    state: &GibbsState,
    data: &[Dataset],
    priors: &HyperPriors,
    rng: &mut SamplerRng,
) -> Result<NoiseModel> {
    match state {
        GibbsState::Oslmm(s) => {
            let post = super::oslmm::noise_posterior(s, data, priors)?;
            Ok(NoiseModel::Homogeneous(post.sample(rng)))
        }
        GibbsState::Slmm(s) => {
            let posts = super::slmm::noise_posteriors(s, data, priors)?;
            Ok(NoiseModel::PerChannel(
                posts.iter().map(|p| p.sample(rng)).collect(),
            ))
        }
    }
}

/// Draws the variance of the log-scale processes (OSLMM) or of the mixing
/// processes (SLMM).
pub fn sample_scale_variance(
    state: &GibbsState,
    times: &[f64],
    priors: &HyperPriors,
    rng: &mut SamplerRng,
) -> Result<f64> {
    let post = match state {
        GibbsState::Oslmm(s) => super::oslmm::scale_posterior(s, times, priors)?,
        GibbsState::Slmm(s) => super::slmm::scale_posterior(s, times, priors)?,
    };
    Ok(post.sample(rng))
}

/// Process family whose length-scale is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessFamily {
    Latent,
    LogScale,
    Mixing,
}

/// Batch size of the step-size adaptation.
pub const ADAPT_BATCH: u32 = 50;
/// Target acceptance rate of the adaptive Metropolis step.
pub const TARGET_ACCEPTANCE: f64 = 0.44;
pub const INITIAL_LOG_STEP: f64 = -std::f64::consts::LN_10;

/// Step-size state of an adaptive Metropolis-within-Gibbs coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub log_step: f64,
    pub batch_accepted: u32,
    pub batch_proposed: u32,
    pub batches: u32,
    pub accepted: u64,
    pub proposed: u64,
}

impl Default for Adaptation {
    fn default() -> Self {
        Self {
            log_step: INITIAL_LOG_STEP,
            batch_accepted: 0,
            batch_proposed: 0,
            batches: 0,
            accepted: 0,
            proposed: 0,
        }
    }
}

impl Adaptation {
    pub fn step(&self) -> f64 {
        self.log_step.exp()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, accepted: bool, adapting: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
        if !adapting {
            return;
        }
        self.batch_proposed += 1;
        self.batch_accepted += accepted as u32;
        if self.batch_proposed == ADAPT_BATCH {
            self.batches += 1;
            let delta = (1.0 / (self.batches as f64).sqrt()).min(0.01);
            let rate = self.batch_accepted as f64 / ADAPT_BATCH as f64;
            if rate > TARGET_ACCEPTANCE {
                self.log_step += delta;
            } else {
                self.log_step -= delta;
            }
            self.batch_accepted = 0;
            self.batch_proposed = 0;
        }
    }
}

/// `sum_i log N(x_i | 0, variance * K(l))` over the given series, or `None`
/// when the Gram matrix cannot be factorized.
pub fn series_log_density(series: &[Vec<f64>], times: &[f64], kernel: &KernelParams) -> Option<f64> {
    let g = gram(times, kernel).ok()?;
    let f = chol_jitter(&g).ok()?;
    Some(series.iter().map(|s| f.log_density(s)).sum())
}

/// Log Metropolis acceptance ratio for moving the length-scale from
/// `kernel.length_scale` to `proposed`. The proposal is a symmetric random
/// walk on `log l` and the prior `p(l^2) ∝ 1/l^2` is flat in `log l`, so the
/// ratio is the ratio of GP marginal densities of the series.
pub fn lengthscale_log_acceptance(
    series: &[Vec<f64>],
    times: &[f64],
    kernel: &KernelParams,
    proposed: f64,
) -> f64 {
    let current = series_log_density(series, times, kernel);
    let next = series_log_density(
        series,
        times,
        &KernelParams {
            length_scale: proposed,
            ..*kernel
        },
    );
    match (current, next) {
        (Some(c), Some(n)) => n - c,
        (_, None) => f64::NEG_INFINITY,
        (None, Some(_)) => f64::INFINITY,
    }
}

/// Outcome of one Metropolis step on a length-scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhStep {
    pub length_scale: f64,
    pub accepted: bool,
    pub log_ratio: f64,
}

/// One random-walk Metropolis step on `log l` for series with prior
/// `N(0, kernel)`.
pub fn mh_lengthscale_step(
    series: &[Vec<f64>],
    times: &[f64],
    kernel: &KernelParams,
    adaptation: &mut Adaptation,
    adapting: bool,
    rng: &mut SamplerRng,
) -> MhStep {
    let z: f64 = rng.sample(StandardNormal);
    let proposed = (kernel.length_scale.ln() + adaptation.step() * z).exp();
    let log_ratio = if proposed.is_finite() && proposed > 0.0 {
        lengthscale_log_acceptance(series, times, kernel, proposed)
    } else {
        f64::NEG_INFINITY
    };
    let u: f64 = rng.random();
    let accepted = log_ratio.is_finite() && u.ln() < log_ratio;
    adaptation.record(accepted, adapting);
    MhStep {
        length_scale: if accepted {
            proposed
        } else {
            kernel.length_scale
        },
        accepted,
        log_ratio,
    }
}

/// Metropolis update of one family's length-scale inside `state`; returns
/// the new length-scale.
pub fn mh_update_lengthscale(
    state: &mut GibbsState,
    which: ProcessFamily,
    times: &[f64],
    adapting: bool,
    rng: &mut SamplerRng,
) -> Result<f64> {
    match (state, which) {
        (GibbsState::Oslmm(s), ProcessFamily::Latent) => Ok(s.update_f_lengthscale(times, adapting, rng)),
        (GibbsState::Oslmm(s), ProcessFamily::LogScale) => Ok(s.update_h_lengthscale(times, adapting, rng)),
        (GibbsState::Slmm(s), ProcessFamily::Latent) => Ok(s.update_f_lengthscale(times, adapting, rng)),
        (GibbsState::Slmm(s), ProcessFamily::Mixing) => Ok(s.update_w_lengthscale(times, adapting, rng)),
        (_, fam) => Err(Error::InvalidInput(format!(
            "process family {fam:?} does not exist in this model"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn inverse_gamma_sample_mean() {
        let ig = InverseGamma::new(12.0, 5.5).unwrap();
        let mut rng = SamplerRng::seed_from_u64(1);
        let n = 5000;
        let m = (0..n).map(|_| ig.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - ig.mean()).abs() < 0.05 * ig.mean());
    }

    #[test]
    fn inverse_gamma_log_density_matches_statrs() {
        use statrs::distribution::Continuous;
        let ig = InverseGamma::new(3.0, 2.0).unwrap();
        let oracle = statrs::distribution::InverseGamma::new(3.0, 2.0).unwrap();
        for x in [0.1, 0.7, 2.0, 9.0] {
            assert!((ig.ln_pdf(x) - oracle.ln_pdf(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_posterior_counts_entries_and_quadratic_forms() {
        let times: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let g = gram(&times, &KernelParams::unit(1.5).unwrap()).unwrap();
        let f = chol_jitter(&g).unwrap();
        let a: Vec<f64> = (0..6).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let post = variance_posterior([a.as_slice(), b.as_slice()], &f, 0.5, 0.25).unwrap();
        assert_eq!(post.shape, 0.5 + 6.0);
        let inv = g.entries().clone().try_inverse().unwrap();
        let qa = (nalgebra::DVector::from_vec(a.clone()).transpose() * &inv
            * nalgebra::DVector::from_vec(a))[(0, 0)];
        let qb = (nalgebra::DVector::from_vec(b.clone()).transpose() * &inv
            * nalgebra::DVector::from_vec(b))[(0, 0)];
        assert!((post.rate - (0.25 + (qa + qb) / 2.0)).abs() < 1e-8 * post.rate);
    }

    #[test]
    fn adaptation_moves_only_while_adapting() {
        let mut a = Adaptation::default();
        for _ in 0..50 {
            a.record(true, true);
        }
        assert!(a.log_step > INITIAL_LOG_STEP);
        let frozen = a.log_step;
        for _ in 0..200 {
            a.record(false, false);
        }
        assert_eq!(a.log_step, frozen);
        assert_eq!(a.proposed, 250);
    }

    #[test]
    fn acceptance_ratio_is_marginal_density_ratio() {
        let times: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let series = vec![
            (0..10).map(|i| (i as f64 / 3.0).sin()).collect::<Vec<_>>(),
            (0..10).map(|i| (i as f64 / 2.0).cos()).collect::<Vec<_>>(),
        ];
        let k = KernelParams::new(0.7, 2.0).unwrap();
        let r = lengthscale_log_acceptance(&series, &times, &k, 3.1);
        let oracle = series_log_density(&series, &times, &KernelParams::new(0.7, 3.1).unwrap())
            .unwrap()
            - series_log_density(&series, &times, &k).unwrap();
        assert_eq!(r, oracle);
        // symmetric: reverse move has the negated ratio
        let back = lengthscale_log_acceptance(
            &series,
            &times,
            &KernelParams::new(0.7, 3.1).unwrap(),
            2.0,
        );
        assert!((r + back).abs() < 1e-12);
    }
}
