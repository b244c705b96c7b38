//! Data types and deterministic mathematics shared by the SLMM and OSLMM
//! samplers: the mixing maps, the Stiefel parametrization, the sufficient
//! projection and the Gaussian observation likelihood.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Time stamps plus a P x T observation matrix (column t is `y_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    times: Vec<f64>,
    observations: DMatrix<f64>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, observations: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() || observations.nrows() == 0 {
            return Err(Error::Data("dataset needs P >= 1 and T >= 1".into()));
        }
        if observations.ncols() != times.len() {
            return Err(Error::Shape(format!(
                "{} time stamps but {} observation columns",
                times.len(),
                observations.ncols()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("time stamps must be strictly increasing".into()));
        }
        Ok(Self {
            times,
            observations,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.observations
    }

    pub fn n_channels(&self) -> usize {
        self.observations.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Copy with channel `p` removed.
    pub fn without_channel(&self, p: usize) -> Result<Self> {
        if p >= self.n_channels() || self.n_channels() == 1 {
            return Err(Error::InvalidInput(format!(
                "cannot drop channel {p} of {}",
                self.n_channels()
            )));
        }
        Ok(Self {
            times: self.times.clone(),
            observations: self.observations.clone().remove_row(p),
        })
    }
}

/// Q x T latent processes; row q is `f_q` on the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix(pub DMatrix<f64>);

/// Q x T log-scales; entry (q, t) is `h_q(t) = log [S^{1/2}(t)]_qq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogScaleMatrix(pub DMatrix<f64>);

/// P x Q unconstrained matrix whose polar factor is the mixing basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientMatrix(pub DMatrix<f64>);

/// P x T noise-free signal; column t is `g(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField(pub DMatrix<f64>);

/// Q x T scale-absorbed latents `c(t) = S^{1/2}(t) f(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoLatents(pub DMatrix<f64>);

/// Time-varying SLMM mixing weights. Row `p + P * q` of the backing matrix
/// holds the series `w_pq` over the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingField {
    n_channels: usize,
    n_latents: usize,
    series: DMatrix<f64>,
}

impl MixingField {
    pub fn from_series(n_channels: usize, n_latents: usize, series: DMatrix<f64>) -> Result<Self> {
        if series.nrows() != n_channels * n_latents {
            return Err(Error::Shape(format!(
                "mixing field expects {} series, got {}",
                n_channels * n_latents,
                series.nrows()
            )));
        }
        Ok(Self {
            n_channels,
            n_latents,
            series,
        })
    }

    /// Constant-in-time field equal to `w` at every time.
    pub fn constant(w: &DMatrix<f64>, n_times: usize) -> Self {
        let (p, q) = w.shape();
        let series = DMatrix::from_fn(p * q, n_times, |r, _| w[(r % p, r / p)]);
        Self {
            n_channels: p,
            n_latents: q,
            series,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_latents(&self) -> usize {
        self.n_latents
    }

    pub fn n_times(&self) -> usize {
        self.series.ncols()
    }

    pub fn series(&self) -> &DMatrix<f64> {
        &self.series
    }

    pub fn series_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.series
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, t: usize) -> f64 {
        self.series[(p + self.n_channels * q, t)]
    }

    /// `W_t` as a P x Q matrix.
    pub fn at(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_channels, self.n_latents, |p, q| self.get(p, q, t))
    }
}

/// P x Q matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiefelBasis(DMatrix<f64>);

/// Tolerance of the orthonormality check on construction.
pub const STIEFEL_TOL: f64 = 1e-10;

impl StiefelBasis {
    /// Wraps `u` after checking `|U^T U - I|_inf < STIEFEL_TOL`.
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        let dev = stiefel_deviation(&u);
        if u.ncols() > u.nrows() || !(dev < STIEFEL_TOL) {
            return Err(Error::InvalidInput(format!(
                "columns are not orthonormal (max deviation {dev:e})"
            )));
        }
        Ok(Self(u))
    }

    pub(crate) fn new_unchecked(u: DMatrix<f64>) -> Self {
        Self(u)
    }

    pub fn identity(p: usize, q: usize) -> Self {
        Self(DMatrix::identity(p, q))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n_channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_latents(&self) -> usize {
        self.0.ncols()
    }
}

/// `max |U^T U - I|`.
pub fn stiefel_deviation(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    let q = gram.nrows();
    (gram - DMatrix::<f64>::identity(q, q)).amax()
}

/// Observation noise: homogeneous `sigma_y^2 I` (OSLMM) or a per-channel
/// diagonal (SLMM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Homogeneous(f64),
    PerChannel(Vec<f64>),
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            NoiseModel::Homogeneous(v) => v.is_finite() && *v > 0.0,
            NoiseModel::PerChannel(vs) => vs.iter().all(|v| v.is_finite() && *v > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("noise variances must be positive".into()))
        }
    }

    #[inline]
    pub fn variance(&self, p: usize) -> f64 {
        match self {
            NoiseModel::Homogeneous(v) => *v,
            NoiseModel::PerChannel(vs) => vs[p],
        }
    }

    pub fn homogeneous(&self) -> Result<f64> {
        match self {
            NoiseModel::Homogeneous(v) => Ok(*v),
            NoiseModel::PerChannel(_) => Err(Error::InvalidInput(
                "OSLMM supports homogeneous noise only".into(),
            )),
        }
    }
}

/// Sufficient statistics `T_t y_t` and the diagonals of their noise
/// covariances. Row q gives the pseudo-observations of `f_q` and their
/// variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedData {
    pub projected: DMatrix<f64>,
    pub noise_diag: DMatrix<f64>,
}

/// Polar factor `V (V^T V)^{-1/2}`, computed from the thin SVD as
/// `U_svd V_svd^T`. This is also the Frobenius-nearest matrix with
/// orthonormal columns.
pub fn polar_orthonormalize(v: &AmbientMatrix) -> Result<StiefelBasis> {
    polar_factor(&v.0).map(StiefelBasis::new_unchecked)
}

pub(crate) fn polar_factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = v.shape();
    if q == 0 || q > p {
        return Err(Error::Shape(format!("polar factor needs P >= Q >= 1, got {p}x{q}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("polar factor of non-finite matrix".into()));
    }
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin < 1e-12 * smax {
        return Err(Error::RankDeficient {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }
    let u = svd.u.expect("requested left singular vectors");
    let vt = svd.v_t.expect("requested right singular vectors");
    Ok(u * vt)
}

/// Flips column signs so that each column's largest-magnitude entry is
/// positive.
pub fn canonicalize_column_signs(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

fn check_latent_shapes(u: &StiefelBasis, h: &LogScaleMatrix, n_times: usize) -> Result<()> {
    if h.0.nrows() != u.n_latents() || h.0.ncols() != n_times {
        return Err(Error::Shape(format!(
            "log-scales are {}x{}, expected {}x{}",
            h.0.nrows(),
            h.0.ncols(),
            u.n_latents(),
            n_times
        )));
    }
    Ok(())
}

/// Column t is `S_t^{-1/2} U^T y_t`; noise entry (q, t) is
/// `sigma_y^2 exp(-2 h_q(t))`.
pub fn project_observations(
    data: &Dataset,
    u: &StiefelBasis,
    h: &LogScaleMatrix,
    noise: &NoiseModel,
) -> Result<ProjectedData> {
    let sigma2 = noise.homogeneous()?;
    if u.n_channels() != data.n_channels() {
        return Err(Error::Shape(format!(
            "basis has {} rows but data has {} channels",
            u.n_channels(),
            data.n_channels()
        )));
    }
    check_latent_shapes(u, h, data.n_times())?;
    let z = u.values().transpose() * data.observations();
    Ok(project_from_scores(&z, h, sigma2))
}

/// Same as [`project_observations`] given precomputed scores `U^T Y`.
pub(crate) fn project_from_scores(z: &DMatrix<f64>, h: &LogScaleMatrix, sigma2: f64) -> ProjectedData {
    let projected = z.zip_map(&h.0, |zv, hv| zv * (-hv).exp());
    let noise_diag = h.0.map(|hv| sigma2 * (-2.0 * hv).exp());
    ProjectedData {
        projected,
        noise_diag,
    }
}

/// `g(t) = U diag(exp(h(t))) f(t)`.
pub fn latent_signal(u: &StiefelBasis, h: &LogScaleMatrix, f: &LatentMatrix) -> Result<MeanField> {
    check_latent_shapes(u, h, f.0.ncols())?;
    if f.0.nrows() != u.n_latents() {
        return Err(Error::Shape("latent rows differ from basis columns".into()));
    }
    let c = orthonormalized_latents(h, f)?;
    Ok(MeanField(u.values() * c.0))
}

/// Sum over t of `log N(y_t | g_t, Sigma)` for diagonal `Sigma`.
pub fn log_likelihood(data: &Dataset, g: &MeanField, noise: &NoiseModel) -> Result<f64> {
    let y = data.observations();
    if g.0.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "mean field is {:?}, observations are {:?}",
            g.0.shape(),
            y.shape()
        )));
    }
    if let NoiseModel::PerChannel(v) = noise {
        if v.len() != y.nrows() {
            return Err(Error::Shape("per-channel noise length differs from P".into()));
        }
    }
    let (p, t) = y.shape();
    let mut total = 0.0;
    for ch in 0..p {
        let var = noise.variance(ch);
        let mut ss = 0.0;
        for tt in 0..t {
            let r = y[(ch, tt)] - g.0[(ch, tt)];
            ss += r * r;
        }
        total += -0.5 * (t as f64) * (LN_2PI + var.ln()) - 0.5 * ss / var;
    }
    Ok(total)
}

/// `c(t) = S^{1/2}(t) f(t)`, entrywise `exp(h) * f`.
pub fn orthonormalized_latents(h: &LogScaleMatrix, f: &LatentMatrix) -> Result<OrthoLatents> {
    if h.0.shape() != f.0.shape() {
        return Err(Error::Shape(format!(
            "log-scales {:?} vs latents {:?}",
            h.0.shape(),
            f.0.shape()
        )));
    }
    Ok(OrthoLatents(f.0.zip_map(&h.0, |fv, hv| hv.exp() * fv)))
}

/// Column t is `W_t f_t`.
pub fn slmm_mean(w: &MixingField, f: &LatentMatrix) -> Result<MeanField> {
    if w.n_latents() != f.0.nrows() || w.n_times() != f.0.ncols() {
        return Err(Error::Shape(format!(
            "mixing field ({}x{}x{}) incompatible with latents {:?}",
            w.n_channels(),
            w.n_latents(),
            w.n_times(),
            f.0.shape()
        )));
    }
    let (p, q, t) = (w.n_channels(), w.n_latents(), w.n_times());
    let mut g = DMatrix::zeros(p, t);
    for tt in 0..t {
        for qq in 0..q {
            let fv = f.0[(qq, tt)];
            for pp in 0..p {
                g[(pp, tt)] += w.get(pp, qq, tt) * fv;
            }
        }
    }
    Ok(MeanField(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn times(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![0.0, 0.0], DMatrix::zeros(1, 2)).is_err());
        assert!(Dataset::new(vec![0.0, 1.0], DMatrix::zeros(1, 3)).is_err());
        assert!(Dataset::new(vec![], DMatrix::zeros(1, 0)).is_err());
        let mut y = DMatrix::zeros(2, 2);
        y[(0, 1)] = f64::NAN;
        assert!(Dataset::new(vec![0.0, 1.0], y).is_err());
    }

    #[test]
    fn polar_of_orthonormal_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = gaussian(6, 3, &mut rng).qr().q();
        let u = polar_orthonormalize(&AmbientMatrix(q.clone())).unwrap();
        assert!((u.values() - q).amax() < 1e-12);
    }

    #[test]
    fn polar_matches_inverse_square_root_oracle() {
        // Oracle: V (V^T V)^{-1/2} through a symmetric eigendecomposition,
        // independent of the SVD route.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = gaussian(5, 2, &mut rng);
        let eig = (v.transpose() * &v).symmetric_eigen();
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        let oracle = &v * inv_sqrt;
        let u = polar_orthonormalize(&AmbientMatrix(v)).unwrap();
        assert!((u.values() - oracle).amax() < 1e-8);
        assert!(stiefel_deviation(u.values()) < 1e-10);
    }

    #[test]
    fn polar_rejects_rank_deficiency() {
        let v = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            polar_orthonormalize(&AmbientMatrix(v)),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn column_sign_convention() {
        let mut u = DMatrix::from_row_slice(3, 2, &[0.1, -0.2, -0.9, 0.1, 0.3, 0.05]);
        canonicalize_column_signs(&mut u);
        assert!(u[(1, 0)] > 0.0);
        assert!(u[(0, 1)] > 0.0);
    }

    #[test]
    fn identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = gaussian(3, 4, &mut rng);
        let data = Dataset::new(times(4), y.clone()).unwrap();
        let proj = project_observations(
            &data,
            &StiefelBasis::identity(3, 3),
            &LogScaleMatrix(DMatrix::zeros(3, 4)),
            &NoiseModel::Homogeneous(0.7),
        )
        .unwrap();
        assert_eq!(proj.projected, y);
        assert!(proj.noise_diag.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn projection_scaling_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Dataset::new(times(3), gaussian(4, 3, &mut rng)).unwrap();
        let u = polar_orthonormalize(&AmbientMatrix(gaussian(4, 2, &mut rng))).unwrap();
        let h = LogScaleMatrix(gaussian(2, 3, &mut rng));
        let mut h2 = h.clone();
        h2.0[(1, 2)] += std::f64::consts::LN_2;
        let noise = NoiseModel::Homogeneous(0.3);
        let a = project_observations(&data, &u, &h, &noise).unwrap();
        let b = project_observations(&data, &u, &h2, &noise).unwrap();
        assert!((b.projected[(1, 2)] - a.projected[(1, 2)] / 2.0).abs() < 1e-14);
        assert!((b.noise_diag[(1, 2)] - a.noise_diag[(1, 2)] / 4.0).abs() < 1e-14);
        assert_eq!(a.projected[(0, 0)], b.projected[(0, 0)]);
    }

    #[test]
    fn projection_small_instance_direct_oracle() {
        let u = DMatrix::from_row_slice(
            3,
            2,
            &[
                1.0 / 2f64.sqrt(),
                0.0,
                1.0 / 2f64.sqrt(),
                0.0,
                0.0,
                1.0,
            ],
        );
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 3.0, -2.0]);
        let h = DMatrix::from_column_slice(2, 1, &[0.5, -0.25]);
        let data = Dataset::new(vec![0.0], y).unwrap();
        let proj = project_observations(
            &data,
            &StiefelBasis::new(u).unwrap(),
            &LogScaleMatrix(h),
            &NoiseModel::Homogeneous(2.0),
        )
        .unwrap();
        // S^{-1/2} U^T y = (exp(-0.5) * 4/sqrt(2), exp(0.25) * (-2))
        assert!((proj.projected[(0, 0)] - (-0.5f64).exp() * 4.0 / 2f64.sqrt()).abs() < 1e-14);
        assert!((proj.projected[(1, 0)] + 2.0 * 0.25f64.exp()).abs() < 1e-14);
        assert!((proj.noise_diag[(0, 0)] - 2.0 * (-1.0f64).exp()).abs() < 1e-14);
        assert!((proj.noise_diag[(1, 0)] - 2.0 * 0.5f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn latent_signal_identity_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = LatentMatrix(gaussian(3, 5, &mut rng));
        let g = latent_signal(
            &StiefelBasis::identity(3, 3),
            &LogScaleMatrix(DMatrix::zeros(3, 5)),
            &f,
        )
        .unwrap();
        assert_eq!(g.0, f.0);

        let u = polar_orthonormalize(&AmbientMatrix(gaussian(6, 3, &mut rng))).unwrap();
        let h = LogScaleMatrix(gaussian(3, 5, &mut rng));
        let g1 = latent_signal(&u, &h, &f).unwrap();
        let g2 = latent_signal(&u, &h, &LatentMatrix(&f.0 * 2.5)).unwrap();
        assert!((g2.0 - g1.0 * 2.5).amax() < 1e-12);
    }

    #[test]
    fn latent_signal_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = polar_orthonormalize(&AmbientMatrix(gaussian(4, 2, &mut rng))).unwrap();
        let h = LogScaleMatrix(gaussian(2, 3, &mut rng));
        let f = LatentMatrix(gaussian(2, 3, &mut rng));
        let g = latent_signal(&u, &h, &f).unwrap();
        for p in 0..4 {
            for t in 0..3 {
                let mut acc = 0.0;
                for q in 0..2 {
                    acc += u.values()[(p, q)] * h.0[(q, t)].exp() * f.0[(q, t)];
                }
                assert!((g.0[(p, t)] - acc).abs() < 1e-13);
            }
        }
        let c = orthonormalized_latents(&h, &f).unwrap();
        assert!((u.values() * &c.0 - &g.0).amax() < 1e-13);
        for q in 0..2 {
            for t in 0..3 {
                assert!((c.0[(q, t)] - h.0[(q, t)].exp() * f.0[(q, t)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn orthonormalized_latents_zero_scale() {
        let f = LatentMatrix(DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64));
        let c = orthonormalized_latents(&LogScaleMatrix(DMatrix::zeros(2, 3)), &f).unwrap();
        assert_eq!(c.0, f.0);
    }

    #[test]
    fn log_likelihood_zero_residual() {
        let y = DMatrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64));
        let data = Dataset::new(times(4), y.clone()).unwrap();
        let ll = log_likelihood(&data, &MeanField(y), &NoiseModel::Homogeneous(0.5)).unwrap();
        let expected = -(12.0 / 2.0) * (2.0 * std::f64::consts::PI * 0.5).ln();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_decreases_with_residual() {
        let y = DMatrix::zeros(2, 2);
        let data = Dataset::new(times(2), y).unwrap();
        let noise = NoiseModel::Homogeneous(1.0);
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let mut g = DMatrix::zeros(2, 2);
            g[(1, 0)] = -(k as f64) * 0.7;
            let ll = log_likelihood(&data, &MeanField(g), &noise).unwrap();
            assert!(ll < prev);
            prev = ll;
        }
    }

    #[test]
    fn log_likelihood_univariate_oracle() {
        let y = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.5]);
        let g = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 1.0, 1.5]);
        let data = Dataset::new(times(2), y.clone()).unwrap();
        let var = [0.4, 2.0];
        let ll = log_likelihood(&data, &MeanField(g.clone()), &NoiseModel::PerChannel(var.to_vec()))
            .unwrap();
        let mut oracle = 0.0;
        for p in 0..2 {
            let d = statrs::distribution::Normal::new(0.0, var[p].sqrt()).unwrap();
            for t in 0..2 {
                use statrs::distribution::Continuous;
                oracle += d.ln_pdf(y[(p, t)] - g[(p, t)]);
            }
        }
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn slmm_mean_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = LatentMatrix(gaussian(2, 3, &mut rng));
        let w = MixingField::constant(&DMatrix::identity(2, 2), 3);
        assert_eq!(slmm_mean(&w, &f).unwrap().0, f.0);

        let series = gaussian(6, 2, &mut rng);
        let w = MixingField::from_series(3, 2, series).unwrap();
        let f = LatentMatrix(gaussian(2, 2, &mut rng));
        let g = slmm_mean(&w, &f).unwrap();
        for t in 0..2 {
            let col = w.at(t) * f.0.column(t);
            assert!((g.0.column(t) - col).amax() < 1e-14);
        }

        let w1 = MixingField::from_series(2, 1, gaussian(2, 3, &mut rng)).unwrap();
        let f1 = LatentMatrix(gaussian(1, 3, &mut rng));
        let g1 = slmm_mean(&w1, &f1).unwrap();
        for t in 0..3 {
            for p in 0..2 {
                assert_eq!(g1.0[(p, t)], w1.get(p, 0, t) * f1.0[(0, t)]);
            }
        }
    }

    /// Gaussian posterior density of f under prior N(0, prior_cov), given a
    /// linear-Gaussian observation `obs = A f + e`, `e ~ N(0, noise_cov)`.
    fn posterior_log_density(
        prior_cov: &DMatrix<f64>,
        a: &DMatrix<f64>,
        noise_cov: &DMatrix<f64>,
        obs: &DVector<f64>,
        at: &DVector<f64>,
    ) -> f64 {
        // Explicit joint-Gaussian conditioning.
        let s = a * prior_cov * a.transpose() + noise_cov;
        let s_inv = s.try_inverse().unwrap();
        let gain = prior_cov * a.transpose() * &s_inv;
        let mean = &gain * obs;
        let cov = prior_cov - &gain * a * prior_cov;
        let d = at - mean;
        let cinv = cov.clone().try_inverse().unwrap();
        let k = at.len() as f64;
        -0.5 * ((d.transpose() * cinv * &d)[(0, 0)] + cov.determinant().ln() + k * LN_2PI)
    }

    #[test]
    fn projected_data_is_sufficient_for_the_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = polar_orthonormalize(&AmbientMatrix(gaussian(3, 2, &mut rng))).unwrap();
        let h = LogScaleMatrix(DMatrix::from_column_slice(2, 1, &[0.4, -0.3]));
        let sigma2 = 0.25;
        let y = gaussian(3, 1, &mut rng);
        let data = Dataset::new(vec![0.0], y.clone()).unwrap();
        let prior = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);

        let s_half = DMatrix::from_diagonal(&h.0.column(0).map(f64::exp));
        let a_full = u.values() * &s_half;
        let noise_full = DMatrix::identity(3, 3) * sigma2;

        let proj = project_observations(&data, &u, &h, &NoiseModel::Homogeneous(sigma2)).unwrap();
        let ty = DVector::from_iterator(2, proj.projected.column(0).iter().copied());
        let noise_t = DMatrix::from_diagonal(&DVector::from_iterator(
            2,
            proj.noise_diag.column(0).iter().copied(),
        ));

        let yv = DVector::from_iterator(3, y.iter().copied());
        for i in 0..10 {
            for j in 0..10 {
                let at = DVector::from_vec(vec![-2.0 + 0.4 * i as f64, -2.0 + 0.4 * j as f64]);
                let full = posterior_log_density(&prior, &a_full, &noise_full, &yv, &at);
                let suff = posterior_log_density(
                    &prior,
                    &DMatrix::identity(2, 2),
                    &noise_t,
                    &ty,
                    &at,
                );
                assert!(
                    (full.exp() - suff.exp()).abs() < 1e-8,
                    "densities differ at {at:?}: {full} vs {suff}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn polar_factor_invariant_under_spd_right_factor(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = polar_orthonormalize(&AmbientMatrix(gaussian(5, 3, &mut rng))).unwrap();
            let b = gaussian(3, 3, &mut rng);
            let a = &b * b.transpose() + DMatrix::identity(3, 3) * 0.5;
            let back = polar_orthonormalize(&AmbientMatrix(u.values() * a)).unwrap();
            prop_assert!((back.values() - u.values()).amax() < 1e-8);
        }

        #[test]
        fn likelihood_invariant_under_channel_permutation(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = gaussian(4, 3, &mut rng);
            let g = gaussian(4, 3, &mut rng);
            let perm = [2usize, 0, 3, 1];
            let yp = DMatrix::from_fn(4, 3, |i, j| y[(perm[i], j)]);
            let gp = DMatrix::from_fn(4, 3, |i, j| g[(perm[i], j)]);
            let noise = NoiseModel::Homogeneous(0.9);
            let a = log_likelihood(&Dataset::new(times(3), y).unwrap(), &MeanField(g), &noise).unwrap();
            let b = log_likelihood(&Dataset::new(times(3), yp).unwrap(), &MeanField(gp), &noise).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn reconstruction_from_projection_is_orthogonal_projection(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = gaussian(6, 4, &mut rng);
            let u = polar_orthonormalize(&AmbientMatrix(gaussian(6, 2, &mut rng))).unwrap();
            let h = LogScaleMatrix(gaussian(2, 4, &mut rng));
            let data = Dataset::new(times(4), y.clone()).unwrap();
            let proj = project_observations(&data, &u, &h, &NoiseModel::Homogeneous(1.0)).unwrap();
            let recon = latent_signal(&u, &h, &LatentMatrix(proj.projected)).unwrap();
            let oracle = u.values() * u.values().transpose() * y;
            prop_assert!((recon.0 - oracle).amax() < 1e-8);
        }
    }
}
