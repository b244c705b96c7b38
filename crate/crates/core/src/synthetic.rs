//! Input-dependent Lorenz data: chaotic latents, GP log-scales, random
//! semi-orthogonal bases and the multi-subspace variant.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{chol_jitter, gram, KernelParams};
use crate::model::{
    latent_signal, polar_orthonormalize, AmbientMatrix, Dataset, LatentMatrix, LogScaleMatrix,
    StiefelBasis,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    /// Number of output points.
    pub n_steps: usize,
    /// Integration steps discarded before the first output point.
    pub transient_discard: usize,
    pub initial_state: [f64; 3],
    /// Integration steps between consecutive output points.
    pub stride: usize,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            n_steps: 200,
            transient_discard: 1000,
            initial_state: [1.0, 1.0, 1.0],
            stride: 5,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("Lorenz dt must be positive, got {}", self.dt)));
        }
        if self.n_steps < 2 || self.stride == 0 {
            return Err(Error::Config("Lorenz needs n_steps >= 2 and stride >= 1".into()));
        }
        if ![self.sigma, self.rho, self.beta].iter().chain(&self.initial_state).all(|v| v.is_finite()) {
            return Err(Error::Config("Lorenz parameters must be finite".into()));
        }
        Ok(())
    }

    fn derivative(&self, s: [f64; 3]) -> [f64; 3] {
        [
            self.sigma * (s[1] - s[0]),
            s[0] * (self.rho - s[2]) - s[1],
            s[0] * s[1] - self.beta * s[2],
        ]
    }

    fn rk4_step(&self, s: [f64; 3]) -> [f64; 3] {
        let h = self.dt;
        let add = |a: [f64; 3], b: [f64; 3], w: f64| [a[0] + w * b[0], a[1] + w * b[1], a[2] + w * b[2]];
        let k1 = self.derivative(s);
        let k2 = self.derivative(add(s, k1, h / 2.0));
        let k3 = self.derivative(add(s, k2, h / 2.0));
        let k4 = self.derivative(add(s, k3, h));
        [
            s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        ]
    }
}

/// RK4 trajectory before standardization, 3 x `n_steps`.
pub fn lorenz_raw(config: &LorenzConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let mut s = config.initial_state;
    let check = |s: &[f64; 3], step: usize| -> Result<()> {
        if s.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            Err(Error::Numerical(format!("Lorenz integration diverged at step {step}")))
        } else {
            Ok(())
        }
    };
    for step in 0..config.transient_discard {
        s = config.rk4_step(s);
        check(&s, step)?;
    }
    let mut out = DMatrix::zeros(3, config.n_steps);
    for j in 0..config.n_steps {
        if j > 0 {
            for k in 0..config.stride {
                s = config.rk4_step(s);
                check(&s, config.transient_discard + j * config.stride + k)?;
            }
        }
        for d in 0..3 {
            out[(d, j)] = s[d];
        }
    }
    Ok(out)
}

/// Zero mean and unit (population) variance per row.
pub fn standardize_rows(m: &mut DMatrix<f64>) -> Result<()> {
    let n = m.ncols() as f64;
    for mut row in m.row_iter_mut() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
        let sd = (row.norm_squared() / n).sqrt();
        if sd == 0.0 {
            return Err(Error::Numerical("cannot standardize a constant row".into()));
        }
        row /= sd;
    }
    Ok(())
}

/// Standardized Lorenz trajectory, 3 x `n_steps`.
pub fn lorenz_trajectory(config: &LorenzConfig) -> Result<DMatrix<f64>> {
    let mut m = lorenz_raw(config)?;
    standardize_rows(&mut m)?;
    Ok(m)
}

/// Smoothness of the log-scale processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKernel {
    Short,
    Median,
    Long,
}

impl ScaleKernel {
    /// Length-scales 1, e and e^2.
    pub fn length_scale(self) -> f64 {
        match self {
            ScaleKernel::Short => 1.0,
            ScaleKernel::Median => std::f64::consts::E,
            ScaleKernel::Long => std::f64::consts::E * std::f64::consts::E,
        }
    }

    pub fn params(self) -> KernelParams {
        KernelParams {
            variance: 1.0,
            length_scale: self.length_scale(),
        }
    }
}

/// `n_latents` independent draws from the unit-variance log-scale GP.
pub fn sample_log_scales<R: Rng + ?Sized>(
    kind: ScaleKernel,
    times: &[f64],
    n_latents: usize,
    rng: &mut R,
) -> Result<LogScaleMatrix> {
    let factor = chol_jitter(&gram(times, &kind.params())?)?;
    let mut h = DMatrix::zeros(n_latents, times.len());
    for q in 0..n_latents {
        let z: Vec<f64> = (0..times.len()).map(|_| rng.sample(StandardNormal)).collect();
        h.set_row(q, &factor.mul_lower(&z).transpose());
    }
    Ok(LogScaleMatrix(h))
}

/// Haar-distributed P x Q matrix with orthonormal columns: QR of a standard
/// Gaussian matrix with the signs of R's diagonal moved into Q.
pub fn random_semiorthogonal<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> Result<StiefelBasis> {
    if q == 0 || p < q {
        return Err(Error::InvalidInput(format!("need 1 <= Q <= P, got P={p}, Q={q}")));
    }
    let g = DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut u = qr.q();
    for j in 0..q {
        if r[(j, j)] < 0.0 {
            u.column_mut(j).neg_mut();
        }
    }
    StiefelBasis::new(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_times: usize,
    pub n_channels: usize,
    pub latent_dim: usize,
    pub scale_kernel: ScaleKernel,
    pub noise_std: f64,
    pub seed: u64,
    pub lorenz: LorenzConfig,
    /// Standard deviation of a Gaussian perturbation of the Lorenz initial
    /// state, so that trials get distinct trajectories.
    pub initial_jitter: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_times: 200,
            n_channels: 50,
            latent_dim: 3,
            scale_kernel: ScaleKernel::Median,
            noise_std: 0.1,
            seed: 0,
            lorenz: LorenzConfig::default(),
            initial_jitter: 1.0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != 3 {
            return Err(Error::Config(format!(
                "the Lorenz generator has exactly 3 latents, got latent_dim={}",
                self.latent_dim
            )));
        }
        if self.n_channels < self.latent_dim {
            return Err(Error::Config("n_channels must be at least latent_dim".into()));
        }
        if self.n_times < 2 {
            return Err(Error::Config("n_times must be at least 2".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if !(self.initial_jitter.is_finite() && self.initial_jitter >= 0.0) {
            return Err(Error::Config("initial_jitter must be nonnegative".into()));
        }
        self.lorenz.validate()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times).map(|i| i as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdgpConfig {
    pub base: DgpConfig,
    pub n_trials: usize,
    pub perturb_sigma: f64,
}

impl Default for MdgpConfig {
    fn default() -> Self {
        Self {
            base: DgpConfig::default(),
            n_trials: 20,
            perturb_sigma: 0.01,
        }
    }
}

/// Generated data together with the ground truth that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub dataset: Dataset,
    /// Standardized Lorenz latents.
    pub latents: LatentMatrix,
    pub log_scales: LogScaleMatrix,
    pub basis: StiefelBasis,
    /// The added noise, so observations can be recomputed exactly.
    pub noise: DMatrix<f64>,
}

impl SyntheticBundle {
    /// Noise-free signal `U (exp(h) * f)`.
    pub fn signal(&self) -> DMatrix<f64> {
        latent_signal(&self.basis, &self.log_scales, &self.latents)
            .expect("consistent shapes")
            .0
    }
}

fn generate_with_basis<R: Rng + ?Sized>(config: &DgpConfig, basis: StiefelBasis, rng: &mut R) -> Result<SyntheticBundle> {
    let mut lorenz = LorenzConfig {
        n_steps: config.n_times,
        ..config.lorenz
    };
    for v in lorenz.initial_state.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += config.initial_jitter * z;
    }
    let latents = LatentMatrix(lorenz_trajectory(&lorenz)?);
    let times = config.times();
    let log_scales = sample_log_scales(config.scale_kernel, &times, config.latent_dim, rng)?;
    let signal = latent_signal(&basis, &log_scales, &latents)?.0;
    let noise = DMatrix::from_fn(config.n_channels, config.n_times, |_, _| {
        config.noise_std * rng.sample::<f64, _>(StandardNormal)
    });
    let dataset = Dataset::new(times, &signal + &noise)?;
    Ok(SyntheticBundle {
        dataset,
        latents,
        log_scales,
        basis,
        noise,
    })
}

/// `y_t = U (exp(h_t) * f_t) + eta_t` on the grid `t = 0, ..., T-1`.
pub fn generate_dgp<R: Rng + ?Sized>(config: &DgpConfig, rng: &mut R) -> Result<SyntheticBundle> {
    config.validate()?;
    let basis = random_semiorthogonal(config.n_channels, config.latent_dim, rng)?;
    generate_with_basis(config, basis, rng)
}

/// One base basis `U`, then per trial `U_i = polar(U + sigma E_i)` and an
/// independent draw of f, h and noise.
pub fn generate_mdgp<R: Rng + ?Sized>(config: &MdgpConfig, rng: &mut R) -> Result<(StiefelBasis, Vec<SyntheticBundle>)> {
    config.base.validate()?;
    if config.n_trials == 0 {
        return Err(Error::Config("n_trials must be positive".into()));
    }
    if !(config.perturb_sigma.is_finite() && config.perturb_sigma >= 0.0) {
        return Err(Error::Config("perturb_sigma must be nonnegative".into()));
    }
    let (p, q) = (config.base.n_channels, config.base.latent_dim);
    let base = random_semiorthogonal(p, q, rng)?;
    let mut trials = Vec::with_capacity(config.n_trials);
    for _ in 0..config.n_trials {
        let (_, ui) = perturbed_basis(&base, config.perturb_sigma, rng)?;
        trials.push(generate_with_basis(&config.base, ui, rng)?);
    }
    Ok((base, trials))
}

/// `V = U + sigma E` and its nearest semi-orthogonal matrix.
pub fn perturbed_basis<R: Rng + ?Sized>(
    base: &StiefelBasis,
    sigma: f64,
    rng: &mut R,
) -> Result<(AmbientMatrix, StiefelBasis)> {
    let u = base.values();
    if sigma == 0.0 {
        return Ok((AmbientMatrix(u.clone()), base.clone()));
    }
    let e = DMatrix::from_fn(u.nrows(), u.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = AmbientMatrix(u + e * sigma);
    let ui = polar_orthonormalize(&v)?;
    Ok((v, ui))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::se_kernel;
    use crate::model::stiefel_deviation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_rows() {
        let m = lorenz_trajectory(&LorenzConfig::default()).unwrap();
        assert_eq!(m.shape(), (3, 200));
        for row in m.row_iter() {
            let mean = row.sum() / 200.0;
            let var = row.map(|v| (v - mean).powi(2)).sum() / 200.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        // one Lyapunov time is about 1.1 time units: compare at t = 0.5
        let run = |dt: f64, steps: usize| {
            lorenz_raw(&LorenzConfig {
                dt,
                n_steps: 2,
                transient_discard: 0,
                stride: steps,
                ..LorenzConfig::default()
            })
            .unwrap()
            .column(1)
            .into_owned()
        };
        let reference = run(0.0005, 1000);
        let e1 = (run(0.02, 25) - &reference).norm();
        let e2 = (run(0.01, 50) - &reference).norm();
        let ratio = e1 / e2;
        assert!(ratio > 10.0 && ratio < 24.0, "error ratio {ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = LorenzConfig {
            dt: 0.5,
            transient_discard: 100,
            ..LorenzConfig::default()
        };
        assert!(matches!(lorenz_raw(&cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn scale_kernels_closed_form() {
        for k in [ScaleKernel::Short, ScaleKernel::Median, ScaleKernel::Long] {
            assert_eq!(se_kernel(0.0, 0.0, &k.params()).unwrap(), 1.0);
        }
        let short = se_kernel(0.0, 1.0, &ScaleKernel::Short.params()).unwrap();
        assert!((short - (-0.5f64).exp()).abs() < 1e-15);
        let e2 = std::f64::consts::E.powi(2);
        let long = se_kernel(0.0, e2, &ScaleKernel::Long.params()).unwrap();
        assert!((long - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn log_scale_marginal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut acc = vec![0.0; 10];
        let n = 2000;
        for _ in 0..n {
            let h = sample_log_scales(ScaleKernel::Median, &times, 1, &mut rng).unwrap();
            for (t, a) in acc.iter_mut().enumerate() {
                *a += h.0[(0, t)].powi(2);
            }
        }
        for a in acc {
            assert!((a / n as f64 - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn semiorthogonal_shape_and_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (p, q) in [(3, 3), (10, 4), (50, 3)] {
            let u = random_semiorthogonal(p, q, &mut rng).unwrap();
            assert_eq!(u.values().shape(), (p, q));
            assert!(stiefel_deviation(u.values()) < 1e-12);
        }
        assert!(random_semiorthogonal(2, 3, &mut rng).is_err());
    }

    #[test]
    fn noiseless_flat_scale_gives_exact_product() {
        let cfg = DgpConfig {
            n_times: 30,
            n_channels: 6,
            noise_std: 0.0,
            ..DgpConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = generate_dgp(&cfg, &mut rng).unwrap();
        b.log_scales.0.fill(0.0);
        let y = latent_signal(&b.basis, &b.log_scales, &b.latents).unwrap().0;
        assert_eq!(y, b.basis.values() * &b.latents.0);
    }

    #[test]
    fn bundle_round_trips_bitwise() {
        let cfg = DgpConfig {
            n_times: 40,
            n_channels: 8,
            ..DgpConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = generate_dgp(&cfg, &mut rng).unwrap();
        assert_eq!(&(b.signal() + &b.noise), b.dataset.observations());
    }

    #[test]
    fn trials_get_distinct_latents() {
        let cfg = MdgpConfig {
            base: DgpConfig {
                n_times: 20,
                n_channels: 5,
                ..DgpConfig::default()
            },
            n_trials: 2,
            perturb_sigma: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (base, trials) = generate_mdgp(&cfg, &mut rng).unwrap();
        assert_ne!(trials[0].latents, trials[1].latents);
        for t in &trials {
            assert_eq!(&t.basis, &base);
        }
    }

    #[test]
    fn mdgp_basis_distance_scales_with_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = random_semiorthogonal(50, 3, &mut rng).unwrap();
        for sigma in [0.01, 0.02, 0.05, 0.1] {
            for _ in 0..20 {
                let (_, ui) = perturbed_basis(&base, sigma, &mut rng).unwrap();
                let d = (ui.values() - base.values()).norm();
                assert!(d <= 3.0 * sigma * (50.0f64 * 3.0).sqrt(), "distance {d} at sigma {sigma}");
            }
        }
    }

    #[test]
    fn dgp_config_validation() {
        assert!(DgpConfig { latent_dim: 2, ..DgpConfig::default() }.validate().is_err());
        assert!(DgpConfig { n_channels: 2, ..DgpConfig::default() }.validate().is_err());
        assert!(DgpConfig { noise_std: -1.0, ..DgpConfig::default() }.validate().is_err());
        assert!(DgpConfig::default().validate().is_ok());
    }
}
