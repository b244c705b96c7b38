//! Leave-one-channel-out prediction for the orthogonal model.
//!
//! With all channels observed the latent posterior factorizes over q. Let
//! `A` (QT x T) hold the loadings of channel p, column t being
//! `a_t = diag(exp(h_t)) u_p` placed at time t. Removing the channel
//! subtracts `A A^T / sigma^2` from the posterior precision, so by the
//! Woodbury identity the prediction `A^T mu_{-p}` is
//! `(sigma^2 I - C)^{-1} (sigma^2 s - C y_p)` with `C = A^T Sigma A` and
//! `s = A^T mu`, where `mu`, `Sigma` are the full-data posterior moments.
//! Only T x T systems are solved.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::chol_jitter_matrix;
use crate::model::{Dataset, MeanField};
use crate::samplers::{latent_conditional, GibbsState, OslmmState, PosteriorSamples};

fn check_trial(state: &OslmmState, trial: &Dataset) -> Result<()> {
    let (p, t) = (state.basis().n_channels(), state.log_scales.0.ncols());
    if trial.n_channels() != p || trial.n_times() != t {
        return Err(Error::Shape(format!(
            "posterior is for {p} channels x {t} times but the trial is {} x {}",
            trial.n_channels(),
            trial.n_times()
        )));
    }
    Ok(())
}

/// Posterior-mean signal `U S^{1/2} E[f | y]` of a trial, all channels
/// observed.
pub fn posterior_fit(state: &OslmmState, trial: &Dataset) -> Result<MeanField> {
    check_trial(state, trial)?;
    let post = latent_conditional(state, trial)?;
    let (q, t) = state.log_scales.0.shape();
    let mut c = DMatrix::zeros(q, t);
    for (qq, (mean, _)) in post.iter().enumerate() {
        for tt in 0..t {
            c[(qq, tt)] = state.log_scales.0[(qq, tt)].exp() * mean[tt];
        }
    }
    Ok(MeanField(state.basis().values() * c))
}

/// Predictive mean of one channel for one posterior sample, conditioning
/// on every other channel of the trial.
pub fn loco_predict_state(state: &OslmmState, trial: &Dataset, channel: usize) -> Result<Vec<f64>> {
    check_trial(state, trial)?;
    if channel >= trial.n_channels() {
        return Err(Error::InvalidInput(format!(
            "channel {channel} out of range for {} channels",
            trial.n_channels()
        )));
    }
    let post = latent_conditional(state, trial)?;
    let (q, t) = state.log_scales.0.shape();
    let u = state.basis().values();
    let sigma2 = state.noise_variance;
    let mut s = DVector::zeros(t);
    let mut c = DMatrix::zeros(t, t);
    for (qq, (mean, cov)) in post.iter().enumerate().take(q) {
        let a: Vec<f64> = (0..t)
            .map(|tt| u[(channel, qq)] * state.log_scales.0[(qq, tt)].exp())
            .collect();
        for i in 0..t {
            s[i] += a[i] * mean[i];
            for j in 0..t {
                c[(i, j)] += a[i] * cov[(i, j)] * a[j];
            }
        }
    }
    let y_p = DVector::from_iterator(t, trial.observations().row(channel).iter().copied());
    let mut m = -&c;
    for i in 0..t {
        m[(i, i)] += sigma2;
    }
    let factor = chol_jitter_matrix(&m)?;
    let rhs = &s * sigma2 - &c * y_p;
    Ok(factor.solve_vec(&rhs).iter().copied().collect())
}

/// Posterior predictive mean of a held-out channel, averaged over the
/// stored samples.
pub fn loco_predict(posterior: &PosteriorSamples, trial: &Dataset, channel: usize) -> Result<Vec<f64>> {
    if posterior.samples.is_empty() {
        return Err(Error::InvalidInput("posterior has no samples".into()));
    }
    let mut acc = vec![0.0; trial.n_times()];
    for s in &posterior.samples {
        let GibbsState::Oslmm(o) = s else {
            return Err(Error::InvalidInput(
                "leave-one-channel-out prediction needs orthogonal-model samples".into(),
            ));
        };
        let pred = loco_predict_state(o, trial, channel)?;
        acc.iter_mut().zip(pred).for_each(|(a, v)| *a += v);
    }
    let n = posterior.samples.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Per-channel sum of squared errors and coefficient of determination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocoReport {
    pub sse: Vec<f64>,
    /// `1 - SSE/TSS`; `None` for a constant channel.
    pub r2: Vec<Option<f64>>,
}

/// Rows of both matrices are channels.
pub fn loco_report(predictions: &DMatrix<f64>, truths: &DMatrix<f64>) -> Result<LocoReport> {
    if predictions.shape() != truths.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} and truths {:?} differ in shape",
            predictions.shape(),
            truths.shape()
        )));
    }
    let mut sse = Vec::with_capacity(truths.nrows());
    let mut r2 = Vec::with_capacity(truths.nrows());
    for p in 0..truths.nrows() {
        let y = truths.row(p);
        let e = (predictions.row(p) - y).norm_squared();
        let mean = y.mean();
        let tss = y.map(|v| (v - mean).powi(2)).sum();
        sse.push(e);
        r2.push(if tss > 0.0 { Some(1.0 - e / tss) } else { None });
    }
    Ok(LocoReport { sse, r2 })
}
