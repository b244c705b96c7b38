//! Chain runner: burn-in, thinning, log-density trace and timing.

use std::time::Instant;

use rand::SeedableRng;

use super::oslmm::oslmm_gibbs_sweep;
use super::slmm::slmm_ess_sweep;
use super::{ChainConfig, GibbsState, HyperPriors, ModelKind, SamplerRng, SweepContext};
use crate::error::{Error, Result};
use crate::model::{Dataset, LatentMatrix, MeanField};

impl GibbsState {
    /// One sweep of the model-appropriate sampler.
    pub fn sweep(&self, data: &[Dataset], ctx: &SweepContext<'_>, rng: &mut SamplerRng) -> Result<(GibbsState, f64)> {
        match self {
            GibbsState::Oslmm(s) => oslmm_gibbs_sweep(s, data, ctx, rng).map(|(s, l)| (GibbsState::Oslmm(s), l)),
            GibbsState::Slmm(s) => slmm_ess_sweep(s, data, ctx, rng).map(|(s, l)| (GibbsState::Slmm(s), l)),
        }
    }

    pub fn latents(&self) -> &[LatentMatrix] {
        match self {
            GibbsState::Oslmm(s) => &s.latents,
            GibbsState::Slmm(s) => &s.latents,
        }
    }

    /// Noise-free signal of one trial.
    pub fn signal(&self, trial: usize) -> MeanField {
        match self {
            GibbsState::Oslmm(s) => s.signal(trial),
            GibbsState::Slmm(s) => s.signal(trial),
        }
    }

    pub fn n_latents(&self) -> usize {
        match self {
            GibbsState::Oslmm(s) => s.n_latents(),
            GibbsState::Slmm(s) => s.n_latents(),
        }
    }
}

/// Output of [`run_chain`].
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub kind: ModelKind,
    pub config: ChainConfig,
    /// Post burn-in, thinned states.
    pub samples: Vec<GibbsState>,
    /// Joint log density after every iteration, burn-in included.
    pub log_density: Vec<f64>,
    /// Wall-clock seconds per iteration.
    pub sweep_seconds: Vec<f64>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_sweep_seconds(&self) -> f64 {
        self.sweep_seconds.iter().sum::<f64>() / self.sweep_seconds.len().max(1) as f64
    }
}

/// Runs `config.iterations` sweeps from `init`, adapting Metropolis step
/// sizes during burn-in only.
pub fn run_chain(
    kind: ModelKind,
    data: &[Dataset],
    config: &ChainConfig,
    priors: &HyperPriors,
    init: GibbsState,
) -> Result<PosteriorSamples> {
    run_chain_observed(kind, data, config, priors, init, |_, _| {})
}

/// [`run_chain`] calling `observer(iteration, log_density)` after every sweep.
pub fn run_chain_observed<F>(
    kind: ModelKind,
    data: &[Dataset],
    config: &ChainConfig,
    priors: &HyperPriors,
    init: GibbsState,
    mut observer: F,
) -> Result<PosteriorSamples>
where
    F: FnMut(usize, f64),
{
    config.validate()?;
    priors.validate()?;
    if init.kind() != kind {
        return Err(Error::Config(format!(
            "initial state is {:?} but the chain was asked to run {:?}",
            init.kind(),
            kind
        )));
    }
    let mut rng = SamplerRng::seed_from_u64(config.seed);
    let mut state = init;
    let mut samples = Vec::with_capacity(config.expected_samples());
    let mut log_density = Vec::with_capacity(config.iterations);
    let mut sweep_seconds = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let ctx = SweepContext {
            priors,
            flags: &config.flags,
            adapt: it < config.burnin,
        };
        let start = Instant::now();
        let (next, lp) = state.sweep(data, &ctx, &mut rng).map_err(|e| Error::Sweep {
            iteration: it,
            source: Box::new(e),
        })?;
        sweep_seconds.push(start.elapsed().as_secs_f64());
        state = next;
        log_density.push(lp);
        observer(it, lp);
        if it >= config.burnin && (it - config.burnin + 1).is_multiple_of(config.thinning) {
            samples.push(state.clone());
        }
    }
    Ok(PosteriorSamples {
        kind,
        config: *config,
        samples,
        log_density,
        sweep_seconds,
    })
}
