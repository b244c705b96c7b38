//! Gibbs sweep for the orthogonal model.
//!
//! Because `U` has orthonormal columns and the noise is homogeneous,
//! `|y_t - U c_t|^2 = |y_t|^2 - 2 c_t^T U^T y_t + |c_t|^2`: every block
//! likelihood below only needs the scores `U^T Y` (for f and h) or the
//! cross-product `Y C^T` (for V), never the full residual.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ess::{ess_step_from, StandardPrior};
use super::hyper::{mh_lengthscale_step, rows_of, variance_posterior, Adaptation, InverseGamma};
use super::{check_trials, data_variance, HyperPriors, SamplerRng, SweepContext};
use crate::error::{Error, Result};
use crate::kernels::{chol_jitter, gram, CholeskyFactor, KernelParams};
use crate::model::{
    canonicalize_column_signs, log_likelihood, orthonormalized_latents, polar_factor,
    project_from_scores, AmbientMatrix, Dataset, LatentMatrix, LogScaleMatrix, MeanField,
    NoiseModel, OrthoLatents, StiefelBasis,
};

/// Full OSLMM state: per-trial latents, shared log-scales and basis, and
/// model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OslmmState {
    /// One Q x T latent matrix per trial.
    pub latents: Vec<LatentMatrix>,
    pub log_scales: LogScaleMatrix,
    ambient: AmbientMatrix,
    basis: StiefelBasis,
    pub noise_variance: f64,
    /// Kernel of the latent processes; its variance stays at 1.
    pub f_kernel: KernelParams,
    /// Kernel of the log-scale processes; its variance is `sigma_h^2`.
    pub h_kernel: KernelParams,
    pub f_adapt: Adaptation,
    pub h_adapt: Adaptation,
}

impl OslmmState {
    pub fn new(
        latents: Vec<LatentMatrix>,
        log_scales: LogScaleMatrix,
        ambient: AmbientMatrix,
        noise_variance: f64,
        f_kernel: KernelParams,
        h_kernel: KernelParams,
    ) -> Result<Self> {
        let basis = StiefelBasis::new(polar_factor(&ambient.0)?)?;
        let state = Self {
            latents,
            log_scales,
            ambient,
            basis,
            noise_variance,
            f_kernel,
            h_kernel,
            f_adapt: Adaptation::default(),
            h_adapt: Adaptation::default(),
        };
        state.validate()?;
        Ok(state)
    }

    /// State whose ambient matrix equals the given basis.
    pub fn from_basis(
        latents: Vec<LatentMatrix>,
        log_scales: LogScaleMatrix,
        basis: StiefelBasis,
        noise_variance: f64,
        f_kernel: KernelParams,
        h_kernel: KernelParams,
    ) -> Result<Self> {
        let state = Self {
            latents,
            log_scales,
            ambient: AmbientMatrix(basis.values().clone()),
            basis,
            noise_variance,
            f_kernel,
            h_kernel,
            f_adapt: Adaptation::default(),
            h_adapt: Adaptation::default(),
        };
        state.validate()?;
        Ok(state)
    }

    /// Rebuilds a stored state whose basis was derived from `ambient`.
    pub(crate) fn from_parts(
        latents: Vec<LatentMatrix>,
        log_scales: LogScaleMatrix,
        ambient: AmbientMatrix,
        basis: StiefelBasis,
        noise_variance: f64,
        f_kernel: KernelParams,
        h_kernel: KernelParams,
    ) -> Result<Self> {
        if ambient.0.shape() != basis.values().shape() {
            return Err(Error::Shape("ambient matrix and basis differ in shape".into()));
        }
        let state = Self {
            latents,
            log_scales,
            ambient,
            basis,
            noise_variance,
            f_kernel,
            h_kernel,
            f_adapt: Adaptation::default(),
            h_adapt: Adaptation::default(),
        };
        state.validate()?;
        Ok(state)
    }

    fn validate(&self) -> Result<()> {
        let q = self.basis.n_latents();
        let t = self.log_scales.0.ncols();
        if self.log_scales.0.nrows() != q {
            return Err(Error::Shape("log-scale rows differ from basis columns".into()));
        }
        if self.latents.is_empty() {
            return Err(Error::Shape("state needs latents for at least one trial".into()));
        }
        if self.latents.iter().any(|f| f.0.shape() != (q, t)) {
            return Err(Error::Shape(format!("every latent matrix must be {q}x{t}")));
        }
        NoiseModel::Homogeneous(self.noise_variance).validate()?;
        self.f_kernel.validate()?;
        self.h_kernel.validate()?;
        Ok(())
    }

    /// Deterministic start: top-Q left singular vectors of the
    /// channel-centered data, zero log-scales, projected data as latents,
    /// noise at a tenth of the data variance and length-scales at a tenth
    /// of the time span.
    pub fn initialize(data: &[Dataset], n_latents: usize) -> Result<Self> {
        let (p, t) = check_trials(data)?;
        if n_latents == 0 || n_latents > p {
            return Err(Error::Config(format!(
                "latent dimension must satisfy 1 <= Q <= P, got Q={n_latents}, P={p}"
            )));
        }
        let basis = StiefelBasis::new(leading_subspace(data, n_latents)?)?;
        let latents = data
            .iter()
            .map(|d| LatentMatrix(basis.values().transpose() * d.observations()))
            .collect();
        let times = data[0].times();
        let span = times[t - 1] - times[0];
        let length_scale = if span > 0.0 { span / 10.0 } else { 1.0 };
        let var = data_variance(data);
        Self::from_basis(
            latents,
            LogScaleMatrix(DMatrix::zeros(n_latents, t)),
            basis,
            if var > 0.0 { 0.1 * var } else { 1e-3 },
            KernelParams::unit(length_scale)?,
            KernelParams::new(1.0, length_scale)?,
        )
    }

    pub fn basis(&self) -> &StiefelBasis {
        &self.basis
    }

    pub fn ambient(&self) -> &AmbientMatrix {
        &self.ambient
    }

    /// Replaces `V` and refreshes the derived basis.
    pub fn set_ambient(&mut self, v: AmbientMatrix) -> Result<()> {
        let u = polar_factor(&v.0)?;
        self.basis = StiefelBasis::new(u)?;
        self.ambient = v;
        Ok(())
    }

    pub fn n_latents(&self) -> usize {
        self.basis.n_latents()
    }

    pub fn n_trials(&self) -> usize {
        self.latents.len()
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel::Homogeneous(self.noise_variance)
    }

    pub fn ortho_latents(&self, trial: usize) -> OrthoLatents {
        orthonormalized_latents(&self.log_scales, &self.latents[trial]).expect("validated shapes")
    }

    pub fn signal(&self, trial: usize) -> MeanField {
        MeanField(self.basis.values() * self.ortho_latents(trial).0)
    }

    fn f_prior(&self, times: &[f64]) -> Result<CholeskyFactor> {
        chol_jitter(&gram(times, &self.f_kernel)?)
    }

    fn h_prior(&self, times: &[f64]) -> Result<CholeskyFactor> {
        chol_jitter(&gram(times, &self.h_kernel)?)
    }

    pub(crate) fn update_f_lengthscale(&mut self, times: &[f64], adapting: bool, rng: &mut SamplerRng) -> f64 {
        let series: Vec<Vec<f64>> = self.latents.iter().flat_map(|f| rows_of(&f.0)).collect();
        let step = mh_lengthscale_step(&series, times, &self.f_kernel, &mut self.f_adapt, adapting, rng);
        self.f_kernel.length_scale = step.length_scale;
        step.length_scale
    }

    pub(crate) fn update_h_lengthscale(&mut self, times: &[f64], adapting: bool, rng: &mut SamplerRng) -> f64 {
        let series = rows_of(&self.log_scales.0);
        let step = mh_lengthscale_step(&series, times, &self.h_kernel, &mut self.h_adapt, adapting, rng);
        self.h_kernel.length_scale = step.length_scale;
        step.length_scale
    }
}

/// Top-`q` left singular vectors of the channel-centered, trial-concatenated
/// data, with the column sign convention applied.
pub(crate) fn leading_subspace(data: &[Dataset], q: usize) -> Result<DMatrix<f64>> {
    let p = data[0].n_channels();
    let total: usize = data.iter().map(|d| d.n_times()).sum();
    let mut stacked = DMatrix::zeros(p, total);
    let mut col = 0;
    for d in data {
        let n = d.n_times();
        stacked.columns_mut(col, n).copy_from(d.observations());
        col += n;
    }
    for mut row in stacked.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    let svd = stacked.svd(true, false);
    let u = svd.u.expect("requested left singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = DMatrix::zeros(p, q);
    for (j, &k) in order.iter().take(q).enumerate() {
        basis.set_column(j, &u.column(k));
    }
    if order.len() < q {
        // fewer samples than latents: complete with an orthonormal extension
        let filler = DMatrix::from_fn(p, q, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut m = basis.clone();
        for j in order.len()..q {
            m.set_column(j, &filler.column(j));
        }
        basis = polar_factor(&m)?;
    }
    canonicalize_column_signs(&mut basis);
    Ok(basis)
}

/// Gaussian posterior of one latent row given pseudo-observations `ytilde`
/// with independent noise variances `noise`, under a prior with covariance
/// `kj`. Everything goes through the factor of `A = K + diag(noise)`.
struct RowPosterior<'a> {
    kj: &'a DMatrix<f64>,
    noise: &'a [f64],
    a_factor: CholeskyFactor,
}

impl<'a> RowPosterior<'a> {
    fn new(kj: &'a DMatrix<f64>, noise: &'a [f64]) -> Result<Self> {
        let mut a = kj.clone();
        for (i, v) in noise.iter().enumerate() {
            a[(i, i)] += v;
        }
        let a_factor = crate::kernels::chol_jitter_matrix(&a)?;
        Ok(Self { kj, noise, a_factor })
    }

    fn gain_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.kj * self.a_factor.solve_vec(v)
    }

    fn mean(&self, ytilde: &DVector<f64>) -> DVector<f64> {
        self.gain_apply(ytilde)
    }

    fn covariance(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(self.noise));
        let noise_trace: f64 = self.noise.iter().sum();
        // pick the form without catastrophic cancellation
        let c = if noise_trace <= self.kj.trace() {
            &d - &d * self.a_factor.solve_mat(&d)
        } else {
            self.kj - self.kj * self.a_factor.solve_mat(self.kj)
        };
        (&c + c.transpose()) * 0.5
    }

    /// Exact draw by perturbing a prior sample:
    /// `f0 + K A^{-1} (ytilde - f0 - e)` with `f0 ~ N(0, K)`, `e ~ N(0, D)`.
    fn sample(&self, prior: &CholeskyFactor, ytilde: &DVector<f64>, rng: &mut SamplerRng) -> DVector<f64> {
        let n = ytilde.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let f0 = prior.mul_lower(&z);
        let e = DVector::from_fn(n, |i, _| {
            let s: f64 = rng.sample(StandardNormal);
            s * self.noise[i].sqrt()
        });
        let resid = ytilde - &f0 - e;
        f0 + self.gain_apply(&resid)
    }
}

/// Posterior mean and covariance of every latent row for one trial:
/// `N((K^{-1} + Σ_q^{-1})^{-1} Σ_q^{-1} ỹ_q, (K^{-1} + Σ_q^{-1})^{-1})`, with
/// `K` the (jittered) latent prior covariance.
pub fn latent_conditional(state: &OslmmState, trial: &Dataset) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let times = trial.times();
    let prior = state.f_prior(times)?;
    let kj = prior.recompose();
    let z = state.basis.values().transpose() * trial.observations();
    let proj = project_from_scores(&z, &state.log_scales, state.noise_variance);
    (0..state.n_latents())
        .map(|q| {
            let ytilde = DVector::from_iterator(times.len(), proj.projected.row(q).iter().copied());
            let noise: Vec<f64> = proj.noise_diag.row(q).iter().copied().collect();
            let post = RowPosterior::new(&kj, &noise)?;
            Ok((post.mean(&ytilde), post.covariance()))
        })
        .collect()
}

/// Draws every trial's latents from their conditional posterior.
pub fn gibbs_update_f(state: &OslmmState, data: &[Dataset], rng: &mut SamplerRng) -> Result<Vec<LatentMatrix>> {
    check_trials(data)?;
    let times = data[0].times();
    let prior = state.f_prior(times)?;
    let kj = prior.recompose();
    let q_dim = state.n_latents();
    let mut out = Vec::with_capacity(data.len());
    for trial in data {
        let z = state.basis.values().transpose() * trial.observations();
        let proj = project_from_scores(&z, &state.log_scales, state.noise_variance);
        let mut f = DMatrix::zeros(q_dim, times.len());
        for q in 0..q_dim {
            let ytilde = DVector::from_iterator(times.len(), proj.projected.row(q).iter().copied());
            let noise: Vec<f64> = proj.noise_diag.row(q).iter().copied().collect();
            let post = RowPosterior::new(&kj, &noise)?;
            let draw = post.sample(&prior, &ytilde, rng);
            f.set_row(q, &draw.transpose());
        }
        out.push(LatentMatrix(f));
    }
    Ok(out)
}

/// Per-time sufficient quantities of row q: `a_t = sum_k f_kqt z_kqt` and
/// `b_t = sum_k f_kqt^2`, so that the log-likelihood of `h_q` is
/// `sum_t (e^{h_t} a_t - e^{2 h_t} b_t / 2) / sigma^2` up to a constant.
fn h_row_statistics(state: &OslmmState, scores: &[DMatrix<f64>], q: usize) -> (Vec<f64>, Vec<f64>) {
    let t = state.log_scales.0.ncols();
    let mut a = vec![0.0; t];
    let mut b = vec![0.0; t];
    for (f, z) in state.latents.iter().zip(scores) {
        for tt in 0..t {
            let fv = f.0[(q, tt)];
            a[tt] += fv * z[(q, tt)];
            b[tt] += fv * fv;
        }
    }
    (a, b)
}

fn h_row_loglik(h: &[f64], a: &[f64], b: &[f64], sigma2: f64) -> f64 {
    let mut acc = 0.0;
    for ((hv, av), bv) in h.iter().zip(a).zip(b) {
        let s = hv.exp();
        acc += s * av - 0.5 * s * s * bv;
    }
    acc / sigma2
}

/// One elliptical slice step per row of H, each against its own likelihood
/// with the other rows held fixed.
pub fn gibbs_update_h(state: &OslmmState, data: &[Dataset], rng: &mut SamplerRng) -> Result<LogScaleMatrix> {
    check_trials(data)?;
    let times = data[0].times();
    let prior = state.h_prior(times)?;
    let scores: Vec<DMatrix<f64>> = data
        .iter()
        .map(|d| state.basis.values().transpose() * d.observations())
        .collect();
    let mut h = state.log_scales.0.clone();
    for q in 0..state.n_latents() {
        let (a, b) = h_row_statistics(state, &scores, q);
        let current: Vec<f64> = h.row(q).iter().copied().collect();
        let sigma2 = state.noise_variance;
        let ll = h_row_loglik(&current, &a, &b, sigma2);
        let out = ess_step_from(&current, ll, &prior, |x| h_row_loglik(x, &a, &b, sigma2), rng)?;
        for (tt, v) in out.state.into_iter().enumerate() {
            h[(q, tt)] = v;
        }
    }
    Ok(LogScaleMatrix(h))
}

/// One elliptical slice step on vec(V) under the standard matrix-normal
/// prior, with the likelihood evaluated through `U = polar(V)`. Proposals
/// whose polar factor does not exist fall outside the slice.
pub fn gibbs_update_v(state: &OslmmState, data: &[Dataset], rng: &mut SamplerRng) -> Result<AmbientMatrix> {
    check_trials(data)?;
    let (p, q) = state.ambient.0.shape();
    let mut cross = DMatrix::zeros(p, q);
    for (k, d) in data.iter().enumerate() {
        let c = state.ortho_latents(k).0;
        cross += d.observations() * c.transpose();
    }
    let sigma2 = state.noise_variance;
    let loglik = |x: &[f64]| -> f64 {
        let v = DMatrix::from_column_slice(p, q, x);
        match polar_factor(&v) {
            Ok(u) => u.dot(&cross) / sigma2,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let current = state.ambient.0.as_slice().to_vec();
    let ll = state.basis.values().dot(&cross) / sigma2;
    let out = ess_step_from(&current, ll, &StandardPrior(p * q), loglik, rng)?;
    Ok(AmbientMatrix(DMatrix::from_vec(p, q, out.state)))
}

fn residual_sum_of_squares(state: &OslmmState, data: &[Dataset]) -> f64 {
    data.iter()
        .enumerate()
        .map(|(k, d)| (d.observations() - state.signal(k).0).norm_squared())
        .sum()
}

/// `IG(a + n P T / 2, b + sum (y - g)^2 / 2)` over all trials.
pub fn noise_posterior(state: &OslmmState, data: &[Dataset], priors: &HyperPriors) -> Result<InverseGamma> {
    let (p, t) = check_trials(data)?;
    let n = (data.len() * p * t) as f64;
    InverseGamma::new(priors.a + n / 2.0, priors.b + residual_sum_of_squares(state, data) / 2.0)
}

/// `IG(c + Q T / 2, d + sum_q h_q^T K~^{-1} h_q / 2)` with `K~` the
/// log-scale correlation matrix.
pub fn scale_posterior(state: &OslmmState, times: &[f64], priors: &HyperPriors) -> Result<InverseGamma> {
    let corr = chol_jitter(&gram(times, &state.h_kernel.correlation())?)?;
    let rows = rows_of(&state.log_scales.0);
    variance_posterior(rows.iter().map(|r| r.as_slice()), &corr, priors.c, priors.d)
}

/// Log joint density of data, latents and parameters (flat prior on the
/// log length-scales).
pub fn joint_log_density(state: &OslmmState, data: &[Dataset], priors: &HyperPriors) -> Result<f64> {
    let times = data[0].times();
    let noise = state.noise_model();
    let mut total = 0.0;
    for (k, d) in data.iter().enumerate() {
        total += log_likelihood(d, &state.signal(k), &noise)?;
    }
    let fp = state.f_prior(times)?;
    for f in &state.latents {
        for row in rows_of(&f.0) {
            total += fp.log_density(&row);
        }
    }
    let hp = state.h_prior(times)?;
    for row in rows_of(&state.log_scales.0) {
        total += hp.log_density(&row);
    }
    let v = &state.ambient.0;
    total += -0.5 * v.norm_squared() - 0.5 * (v.len() as f64) * (2.0 * std::f64::consts::PI).ln();
    total += InverseGamma::new(priors.a, priors.b)?.ln_pdf(state.noise_variance);
    total += InverseGamma::new(priors.c, priors.d)?.ln_pdf(state.h_kernel.variance);
    Ok(total)
}

/// One Gibbs sweep: f, h, V, noise variance, log-scale variance, then the
/// length-scales of f and h. Returns the new state and its log joint
/// density.
pub fn oslmm_gibbs_sweep(
    state: &OslmmState,
    data: &[Dataset],
    ctx: &SweepContext<'_>,
    rng: &mut SamplerRng,
) -> Result<(OslmmState, f64)> {
    check_trials(data)?;
    if data.len() != state.n_trials() {
        return Err(Error::Shape(format!(
            "state has {} trials but {} were supplied",
            state.n_trials(),
            data.len()
        )));
    }
    let times = data[0].times();
    let flags = ctx.flags;
    let mut s = state.clone();
    if flags.latents {
        s.latents = gibbs_update_f(&s, data, rng)?;
    }
    if flags.log_scales {
        s.log_scales = gibbs_update_h(&s, data, rng)?;
    }
    if flags.basis {
        let v = gibbs_update_v(&s, data, rng)?;
        s.set_ambient(v)?;
    }
    if flags.noise {
        s.noise_variance = noise_posterior(&s, data, ctx.priors)?.sample(rng);
    }
    if flags.scale_variance {
        s.h_kernel.variance = scale_posterior(&s, times, ctx.priors)?.sample(rng);
    }
    if flags.length_scales {
        s.update_f_lengthscale(times, ctx.adapt, rng);
        s.update_h_lengthscale(times, ctx.adapt, rng);
    }
    let lp = joint_log_density(&s, data, ctx.priors)?;
    if !lp.is_finite() {
        return Err(Error::Numerical(format!("joint log density is {lp}")));
    }
    Ok((s, lp))
}
