//! Squared-exponential covariances, Gram matrices and the factor/solve
//! routines every sampler goes through.
//!
//! Covariance work never forms an explicit inverse: callers hold a
//! [`CholeskyFactor`] and ask it for solves, quadratic forms and draws.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter ladder tried in order, relative to the mean diagonal.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Variance and length-scale of a squared-exponential covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub length_scale: f64,
}

impl KernelParams {
    pub fn new(variance: f64, length_scale: f64) -> Result<Self> {
        let params = Self {
            variance,
            length_scale,
        };
        params.validate()?;
        Ok(params)
    }

    /// Unit-variance kernel (correlation form).
    pub fn unit(length_scale: f64) -> Result<Self> {
        Self::new(1.0, length_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel variance must be finite and nonnegative, got {}",
                self.variance
            )));
        }
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel length-scale must be finite and positive, got {}",
                self.length_scale
            )));
        }
        Ok(())
    }

    /// Same length-scale, unit variance.
    pub fn correlation(&self) -> Self {
        Self {
            variance: 1.0,
            length_scale: self.length_scale,
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, lag: f64) -> f64 {
        self.variance * (-(lag * lag) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// `variance * exp(-(t1 - t2)^2 / (2 length_scale^2))`.
pub fn se_kernel(t1: f64, t2: f64, params: &KernelParams) -> Result<f64> {
    if !t1.is_finite() || !t2.is_finite() {
        return Err(Error::InvalidInput(format!(
            "kernel inputs must be finite, got ({t1}, {t2})"
        )));
    }
    params.validate()?;
    Ok(params.eval_unchecked(t1 - t2))
}

/// A covariance matrix evaluated on a set of time inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    inputs: Vec<f64>,
}

impl GramMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn dim(&self) -> usize {
        self.inputs.len()
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// First row, meaningful as a Toeplitz generator when the inputs are
    /// evenly spaced.
    pub fn first_row(&self) -> Vec<f64> {
        self.entries.row(0).iter().copied().collect()
    }
}

/// Builds the Gram matrix of `params` over `inputs`.
///
/// Only the lower triangle is evaluated; the upper triangle is a mirrored
/// copy, so the result is bitwise symmetric.
pub fn gram(inputs: &[f64], params: &KernelParams) -> Result<GramMatrix> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("gram: empty input sequence".into()));
    }
    if let Some(bad) = inputs.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidInput(format!("gram: non-finite input {bad}")));
    }
    params.validate()?;
    let n = inputs.len();
    let mut entries = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = params.eval_unchecked(inputs[i] - inputs[j]);
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        entries,
        inputs: inputs.to_vec(),
    })
}

/// True when consecutive gaps agree to within `rel_tol` of the first gap.
pub fn is_evenly_spaced(inputs: &[f64], rel_tol: f64) -> bool {
    if inputs.len() < 3 {
        return true;
    }
    let step = inputs[1] - inputs[0];
    inputs
        .windows(2)
        .all(|w| ((w[1] - w[0]) - step).abs() <= rel_tol * step.abs())
}

/// Lower Cholesky factor of `G + jitter * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L * L^T`, the matrix that was actually factorized.
    pub fn recompose(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for j in 0..n {
            let col = self.lower.column(j);
            let xj = b[j] / col[j];
            b[j] = xj;
            for i in (j + 1)..n {
                b[i] -= col[i] * xj;
            }
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in (0..n).rev() {
            let col = self.lower.column(i);
            let mut acc = b[i];
            for j in (i + 1)..n {
                acc -= col[j] * b[j];
            }
            b[i] = acc / col[i];
        }
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice());
        self.solve_upper_in_place(x.as_mut_slice());
        x
    }

    /// Solves `(L L^T) X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let s = col.as_mut_slice();
            self.solve_lower_in_place(s);
            self.solve_upper_in_place(s);
        }
        x
    }

    /// `x^T (L L^T)^{-1} x`, computed as `|L^{-1} x|^2`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut z = x.to_vec();
        self.solve_lower_in_place(&mut z);
        z.iter().map(|v| v * v).sum()
    }

    /// `log det(L L^T)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L z`, mapping a standard normal vector to a draw with covariance `L L^T`.
    pub fn mul_lower(&self, z: &[f64]) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let col = self.lower.column(j);
            for i in j..n {
                out[i] += col[i] * zj;
            }
        }
        out
    }

    /// Zero-mean Gaussian log density `log N(x | 0, L L^T)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.dim() as f64;
        -0.5 * (self.quad_form(x) + self.log_det() + n * (2.0 * std::f64::consts::PI).ln())
    }
}

fn try_cholesky(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            let v = l[(j, k)];
            d -= v * v;
        }
        if !(d.is_finite() && d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        // column j below the diagonal: (a[i,j] - sum_k l[i,k] l[j,k]) / d
        let mut acc: Vec<f64> = (j + 1..n).map(|i| a[(i, j)]).collect();
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk == 0.0 {
                continue;
            }
            let col = l.column(k);
            for (slot, i) in acc.iter_mut().zip(j + 1..n) {
                *slot -= col[i] * ljk;
            }
        }
        for (v, i) in acc.into_iter().zip(j + 1..n) {
            l[(i, j)] = v / d;
        }
    }
    Some(l)
}

/// Cholesky factor of a symmetric matrix, escalating diagonal jitter along
/// [`JITTER_LADDER`] (scaled by the mean diagonal) until it succeeds.
pub fn chol_jitter_matrix(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Shape(format!(
            "cholesky needs a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mean_diag = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut last = 0.0;
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        last = jitter;
        if let Some(lower) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::Factorization { jitter: last })
}

pub fn chol_jitter(g: &GramMatrix) -> Result<CholeskyFactor> {
    chol_jitter_matrix(&g.entries)
}

/// Solves `T X = B` for the symmetric Toeplitz matrix with first row
/// `first_row` by Levinson recursion, O(T^2) per right-hand side.
///
/// A non-positive prediction-error pivot means the matrix is not
/// (numerically) positive definite; callers then fall back to a dense solve.
pub fn toeplitz_solve(first_row: &[f64], rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = first_row.len();
    if n == 0 {
        return Err(Error::InvalidInput("toeplitz_solve: empty first row".into()));
    }
    if rhs.nrows() != n {
        return Err(Error::Shape(format!(
            "toeplitz_solve: first row has {n} entries but rhs has {} rows",
            rhs.nrows()
        )));
    }
    let t0 = first_row[0];
    if !(t0.is_finite() && t0 > 0.0) {
        return Err(Error::ToeplitzBreakdown { order: 0, pivot: t0 });
    }
    let r: Vec<f64> = first_row[1..].iter().map(|v| v / t0).collect();

    // Durbin pass: reflection coefficients and the backward predictor
    // vectors only depend on the matrix, so run it once and record, for each
    // order k, the predictor y^{(k)} and the error pivot beta_k.
    let mut predictors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut betas: Vec<f64> = Vec::with_capacity(n);
    if n > 1 {
        let mut y = vec![-r[0]];
        let mut alpha = -r[0];
        let mut beta = 1.0;
        predictors.push(y.clone());
        betas.push(beta);
        for k in 1..n {
            beta *= 1.0 - alpha * alpha;
            if !(beta.is_finite() && beta > 0.0) {
                return Err(Error::ToeplitzBreakdown { order: k, pivot: beta });
            }
            betas.push(beta);
            if k < n - 1 {
                let dot: f64 = (0..k).map(|i| r[i] * y[k - 1 - i]).sum();
                alpha = -(r[k] + dot) / beta;
                let z: Vec<f64> = (0..k).map(|i| y[i] + alpha * y[k - 1 - i]).collect();
                y = z;
                y.push(alpha);
                predictors.push(y.clone());
            }
        }
    }

    let mut out = DMatrix::zeros(n, rhs.ncols());
    for (c, b) in rhs.column_iter().enumerate() {
        let b: Vec<f64> = b.iter().map(|v| v / t0).collect();
        let mut x = vec![b[0]];
        for k in 1..n {
            let beta = betas[k];
            let y = &predictors[k - 1];
            let dot: f64 = (0..k).map(|i| r[i] * x[k - 1 - i]).sum();
            let mu = (b[k] - dot) / beta;
            for i in 0..k {
                x[i] += mu * y[k - 1 - i];
            }
            x.push(mu);
        }
        out.column_mut(c).copy_from_slice(&x);
    }
    Ok(out)
}

/// Solves `G X = B` with the Levinson fast path when `g` was built on an
/// evenly spaced grid, otherwise (or on breakdown) through a jittered
/// Cholesky factor.
pub fn gram_solve(g: &GramMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if is_evenly_spaced(g.inputs(), 1e-9) {
        if let Ok(x) = toeplitz_solve(&g.first_row(), rhs) {
            return Ok(x);
        }
    }
    Ok(chol_jitter(g)?.solve_mat(rhs))
}
