//! Elliptical slice sampling for targets of the form
//! `N(x | 0, Sigma) * L(x)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::CholeskyFactor;

/// Zero-mean Gaussian prior that can produce independent draws.
pub trait GaussianPrior {
    fn dim(&self) -> usize;
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;
}

impl GaussianPrior for CholeskyFactor {
    fn dim(&self) -> usize {
        CholeskyFactor::dim(self)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.mul_lower(&z).data.into()
    }
}

/// Standard normal prior `N(0, I)` of a given dimension.
#[derive(Debug, Clone, Copy)]
pub struct StandardPrior(pub usize);

impl GaussianPrior for StandardPrior {
    fn dim(&self) -> usize {
        self.0
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.0).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Same factor scaled by `sqrt(scale)`, i.e. covariance `scale * L L^T`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledPrior<'a> {
    pub factor: &'a CholeskyFactor,
    pub scale: f64,
}

impl GaussianPrior for ScaledPrior<'_> {
    fn dim(&self) -> usize {
        self.factor.dim()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let s = self.scale.sqrt();
        let mut v = self.factor.draw(rng);
        v.iter_mut().for_each(|x| *x *= s);
        v
    }
}

/// Result of one elliptical slice transition.
#[derive(Debug, Clone)]
pub struct EssOutcome {
    pub state: Vec<f64>,
    pub log_lik: f64,
    /// Likelihood evaluations spent on the bracket search.
    pub evaluations: usize,
}

const MAX_SHRINKS: usize = 10_000;

/// One elliptical slice sampling transition (auxiliary prior draw,
/// log-threshold, angle-bracket shrinkage). Always returns a state.
pub fn ess_step<P, L, R>(current: &[f64], prior: &P, mut loglik: L, rng: &mut R) -> Result<EssOutcome>
where
    P: GaussianPrior + ?Sized,
    L: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let current_ll = loglik(current);
    ess_step_from(current, current_ll, prior, loglik, rng)
}

/// [`ess_step`] with the log-likelihood at `current` already known.
pub fn ess_step_from<P, L, R>(
    current: &[f64],
    current_ll: f64,
    prior: &P,
    mut loglik: L,
    rng: &mut R,
) -> Result<EssOutcome>
where
    P: GaussianPrior + ?Sized,
    L: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if prior.dim() != current.len() {
        return Err(Error::Shape(format!(
            "ess: state has {} entries but prior has dimension {}",
            current.len(),
            prior.dim()
        )));
    }
    if !current_ll.is_finite() {
        return Err(Error::Numerical(format!(
            "ess: log-likelihood at current state is {current_ll}"
        )));
    }
    let nu = prior.draw(rng);
    let u: f64 = rng.random();
    let threshold = current_ll + u.ln();

    let two_pi = 2.0 * std::f64::consts::PI;
    let mut theta = rng.random::<f64>() * two_pi;
    let mut lo = theta - two_pi;
    let mut hi = theta;
    let mut proposal = vec![0.0; current.len()];
    let mut evaluations = 0;
    loop {
        let (s, c) = theta.sin_cos();
        for ((p, x), n) in proposal.iter_mut().zip(current).zip(&nu) {
            *p = x * c + n * s;
        }
        let ll = loglik(&proposal);
        evaluations += 1;
        if ll.is_finite() && ll > threshold {
            return Ok(EssOutcome {
                state: proposal,
                log_lik: ll,
                evaluations,
            });
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        if evaluations >= MAX_SHRINKS || hi - lo < 1e-300 {
            return Ok(EssOutcome {
                state: current.to_vec(),
                log_lik: current_ll,
                evaluations,
            });
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::diagnostics::batch_means_se;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn constant_likelihood_preserves_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prior = StandardPrior(2);
        let mut x = vec![0.0, 0.0];
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..5000 {
            x = ess_step(&x, &prior, |_| 0.0, &mut rng).unwrap().state;
            first.push(x[0]);
            second.push(x[1]);
        }
        for xs in [&first, &second] {
            let (m, v) = moments(xs);
            let se = batch_means_se(xs, 50);
            assert!(m.abs() < 4.0 * se, "mean {m}");
            assert!((v - 1.0).abs() < 0.1, "variance {v}");
        }
    }

    #[test]
    fn gaussian_likelihood_gives_analytic_posterior() {
        // prior N(0,1), y = 1 observed with unit noise: posterior N(1/2, 1/2)
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let prior = StandardPrior(1);
        let mut x = vec![0.0];
        let mut xs = Vec::with_capacity(20_000);
        for _ in 0..20_000 {
            x = ess_step(&x, &prior, |v| -0.5 * (1.0 - v[0]).powi(2), &mut rng)
                .unwrap()
                .state;
            xs.push(x[0]);
        }
        let (m, v) = moments(&xs);
        let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
        let se_mean = batch_means_se(&xs, 50);
        let se_var = batch_means_se(&sq, 50);
        assert!((m - 0.5).abs() < 4.0 * se_mean, "mean {m} (se {se_mean})");
        assert!((v - 0.5).abs() < 4.0 * se_var, "variance {v} (se {se_var})");
    }

    #[test]
    fn rejects_non_finite_current_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r = ess_step(&[0.0], &StandardPrior(1), |_| f64::NEG_INFINITY, &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn terminates_on_needle_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = [0.3, -0.2];
        let out = ess_step(
            &x0,
            &StandardPrior(2),
            |v| -1e12 * ((v[0] - 0.3).powi(2) + (v[1] + 0.2).powi(2)),
            &mut rng,
        )
        .unwrap();
        assert!((out.state[0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn cholesky_prior_draws_have_right_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let f = crate::kernels::chol_jitter_matrix(&cov).unwrap();
        let n = 40_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let d = f.draw(&mut rng);
            for i in 0..2 {
                for j in 0..2 {
                    acc[(i, j)] += d[i] * d[j];
                }
            }
        }
        acc /= n as f64;
        assert!((acc - cov).amax() < 0.06);
    }
}
