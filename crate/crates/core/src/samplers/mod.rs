//! MCMC inference for OSLMM (Gibbs sweep over f, h, V and hyperparameters)
//! and SLMM (joint elliptical slice sampling over W and f), plus the chain
//! runner.

pub mod chain;
pub mod diagnostics;
pub mod ess;
pub mod hyper;
pub mod oslmm;
pub mod slmm;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

pub use chain::{run_chain, PosteriorSamples};
pub use ess::{ess_step, EssOutcome, GaussianPrior, StandardPrior};
pub use hyper::{
    mh_update_lengthscale, sample_noise_variance, sample_scale_variance, Adaptation,
    InverseGamma, ProcessFamily,
};
pub use oslmm::{
    gibbs_update_f, gibbs_update_h, gibbs_update_v, latent_conditional, oslmm_gibbs_sweep,
    OslmmState,
};
pub use slmm::{slmm_ess_sweep, SlmmState};

/// The single generator every sampler draws from.
pub type SamplerRng = ChaCha8Rng;

/// Inverse-Gamma hyperpriors: `(a, b)` on the noise variance, `(c, d)` on
/// the variance of the log-scale (OSLMM) or mixing (SLMM) processes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPriors {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            a: 0.01,
            b: 0.01,
            c: 0.01,
            d: 0.01,
        }
    }
}

impl HyperPriors {
    pub fn validate(&self) -> Result<()> {
        if [self.a, self.b, self.c, self.d]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::Config("hyperprior parameters must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Slmm,
    Oslmm,
}

/// Which blocks a sweep updates. Disabled blocks are held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockFlags {
    /// f (OSLMM) or the joint (W, f) block (SLMM).
    pub latents: bool,
    pub log_scales: bool,
    pub basis: bool,
    pub noise: bool,
    pub scale_variance: bool,
    pub length_scales: bool,
}

impl Default for BlockFlags {
    fn default() -> Self {
        Self {
            latents: true,
            log_scales: true,
            basis: true,
            noise: true,
            scale_variance: true,
            length_scales: true,
        }
    }
}

impl BlockFlags {
    pub fn none() -> Self {
        Self {
            latents: false,
            log_scales: false,
            basis: false,
            noise: false,
            scale_variance: false,
            length_scales: false,
        }
    }
}

/// Iteration schedule and seeding for [`run_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thinning: usize,
    pub seed: u64,
    pub flags: BlockFlags,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            burnin: 200,
            thinning: 1,
            seed: 0,
            flags: BlockFlags::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thinning == 0 {
            return Err(Error::Config("iterations and thinning must be positive".into()));
        }
        if self.burnin >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burnin, self.iterations
            )));
        }
        Ok(())
    }

    pub fn expected_samples(&self) -> usize {
        (self.iterations - self.burnin) / self.thinning
    }
}

/// Per-sweep settings shared by all blocks.
#[derive(Debug, Clone, Copy)]
pub struct SweepContext<'a> {
    pub priors: &'a HyperPriors,
    pub flags: &'a BlockFlags,
    /// Metropolis step sizes adapt only while this is set (burn-in).
    pub adapt: bool,
}

/// One full assignment of latents and parameters for either model.
#[derive(Debug, Clone, PartialEq)]
pub enum GibbsState {
    Oslmm(OslmmState),
    Slmm(SlmmState),
}

impl GibbsState {
    pub fn kind(&self) -> ModelKind {
        match self {
            GibbsState::Oslmm(_) => ModelKind::Oslmm,
            GibbsState::Slmm(_) => ModelKind::Slmm,
        }
    }
}

/// Checks that all trials share one time grid and channel count.
pub fn check_trials(data: &[Dataset]) -> Result<(usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Data("no trials supplied".into()))?;
    let (p, t) = (first.n_channels(), first.n_times());
    for (i, d) in data.iter().enumerate().skip(1) {
        if d.n_channels() != p || d.times() != first.times() {
            return Err(Error::Shape(format!(
                "trial {i} does not share the channel count and time grid of trial 0"
            )));
        }
    }
    Ok((p, t))
}

/// Overall variance of all observation entries across trials.
pub(crate) fn data_variance(data: &[Dataset]) -> f64 {
    let n: usize = data.iter().map(|d| d.observations().len()).sum();
    let mean = data
        .iter()
        .flat_map(|d| d.observations().iter())
        .sum::<f64>()
        / n as f64;
    data.iter()
        .flat_map(|d| d.observations().iter())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64
}
