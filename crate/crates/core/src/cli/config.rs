//! JSON configuration files for `generate` and `fit`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::samplers::{BlockFlags, ChainConfig, GibbsState, HyperPriors, ModelKind, OslmmState, SlmmState};
use crate::synthetic::{DgpConfig, MdgpConfig};

/// Environment variable supplying the seed when a config leaves it out.
pub const SEED_ENV: &str = "OSLMM_SEED";

/// Explicit seed, else `OSLMM_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Resolves `p` against the directory containing `base`.
pub(crate) fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Optional starting values overriding the data-driven initialization.
/// `scale_*` refers to the log-scale kernel (OSLMM) or the mixing kernel
/// (SLMM).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialValues {
    pub f_length_scale: Option<f64>,
    pub scale_length_scale: Option<f64>,
    pub scale_variance: Option<f64>,
    pub noise_variance: Option<f64>,
}

impl InitialValues {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_length_scale", self.f_length_scale),
            ("scale_length_scale", self.scale_length_scale),
            ("scale_variance", self.scale_variance),
            ("noise_variance", self.noise_variance),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Config(format!("init.{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

fn default_iterations() -> usize {
    500
}

fn default_burnin() -> usize {
    200
}

fn default_thinning() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub latent_dim: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_burnin")]
    pub burnin: usize,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub blocks: BlockFlags,
    #[serde(default)]
    pub priors: HyperPriors,
    #[serde(default)]
    pub init: InitialValues,
    /// Archive path, relative to the config file.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(model: ModelKind, latent_dim: usize) -> Self {
        Self {
            model,
            latent_dim,
            iterations: default_iterations(),
            burnin: default_burnin(),
            thinning: default_thinning(),
            seed: None,
            blocks: BlockFlags::default(),
            priors: HyperPriors::default(),
            init: InitialValues::default(),
            output: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        self.priors.validate()?;
        self.init.validate()?;
        self.chain_config()?;
        Ok(())
    }

    /// Chain schedule; an unset seed counts as 0.
    pub fn chain_config(&self) -> Result<ChainConfig> {
        let c = ChainConfig {
            iterations: self.iterations,
            burnin: self.burnin,
            thinning: self.thinning,
            seed: self.seed.unwrap_or(0),
            flags: self.blocks,
        };
        c.validate()?;
        Ok(c)
    }

    /// Data-driven initial state with any configured overrides applied.
    pub fn initial_state(&self, data: &[Dataset]) -> Result<GibbsState> {
        self.validate()?;
        let iv = &self.init;
        Ok(match self.model {
            ModelKind::Oslmm => {
                let mut s = OslmmState::initialize(data, self.latent_dim)?;
                if let Some(l) = iv.f_length_scale {
                    s.f_kernel.length_scale = l;
                }
                if let Some(l) = iv.scale_length_scale {
                    s.h_kernel.length_scale = l;
                }
                if let Some(v) = iv.scale_variance {
                    s.h_kernel.variance = v;
                }
                if let Some(v) = iv.noise_variance {
                    s.noise_variance = v;
                }
                GibbsState::Oslmm(s)
            }
            ModelKind::Slmm => {
                let mut s = SlmmState::initialize(data, self.latent_dim)?;
                if let Some(l) = iv.f_length_scale {
                    s.f_kernel.length_scale = l;
                }
                if let Some(l) = iv.scale_length_scale {
                    s.w_kernel.length_scale = l;
                }
                if let Some(v) = iv.scale_variance {
                    s.w_kernel.variance = v;
                }
                if let Some(v) = iv.noise_variance {
                    s.noise.iter_mut().for_each(|n| *n = v);
                }
                GibbsState::Slmm(s)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    /// One trial from a single random basis.
    Dgp,
    /// Several trials, each with its own perturbation of a shared basis.
    Mdgp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub process: Process,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Generator settings. A `seed` given here is used when the top-level
    /// seed is absent.
    #[serde(default)]
    pub dgp: DgpConfig,
    /// MDGP only.
    #[serde(default)]
    pub n_trials: Option<usize>,
    /// MDGP only.
    #[serde(default)]
    pub perturb_sigma: Option<f64>,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl GenerateConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let raw: serde_json::Value = read_json(path)?;
        Self::from_value(raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_value(raw: serde_json::Value) -> Result<Self> {
        let inner_seed = raw.get("dgp").and_then(|d| d.get("seed")).cloned();
        let mut cfg: Self = serde_json::from_value(raw).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.seed.is_none() && inner_seed.is_some() {
            cfg.seed = Some(cfg.dgp.seed);
        }
        Ok(cfg)
    }

    /// The MDGP settings; `None` for a plain DGP run.
    pub fn mdgp(&self) -> Result<Option<MdgpConfig>> {
        match self.process {
            Process::Dgp => {
                if self.n_trials.is_some() || self.perturb_sigma.is_some() {
                    return Err(Error::Config(
                        "n_trials and perturb_sigma apply to the mdgp process only".into(),
                    ));
                }
                Ok(None)
            }
            Process::Mdgp => {
                let d = MdgpConfig::default();
                let cfg = MdgpConfig {
                    base: self.dgp,
                    n_trials: self.n_trials.unwrap_or(d.n_trials),
                    perturb_sigma: self.perturb_sigma.unwrap_or(d.perturb_sigma),
                };
                if cfg.n_trials == 0 {
                    return Err(Error::Config("n_trials must be positive".into()));
                }
                if !(cfg.perturb_sigma.is_finite() && cfg.perturb_sigma >= 0.0) {
                    return Err(Error::Config("perturb_sigma must be nonnegative".into()));
                }
                Ok(Some(cfg))
            }
        }
    }
}
