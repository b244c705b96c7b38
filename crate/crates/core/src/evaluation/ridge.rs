//! Cross-validated ridge regression for decoding external variables from
//! latents.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitted intercept and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub intercept: nalgebra::RowDVector<f64>,
    pub coefficients: DMatrix<f64>,
    x_mean: nalgebra::RowDVector<f64>,
}

impl RidgeFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= &self.x_mean;
        }
        let mut out = centered * &self.coefficients;
        for mut row in out.row_iter_mut() {
            row += &self.intercept;
        }
        out
    }
}

/// Solves `(Xc^T Xc + lambda I) B = Xc^T Yc` on centered data; the
/// intercept is the training mean of the targets. `None` when the system
/// is singular.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Option<RidgeFit> {
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let mut a = xc.transpose() * &xc;
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let scale = a.diagonal().amax().max(1.0);
    let chol = Cholesky::new(a)?;
    let l = chol.l();
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot < 1e-12 * scale {
        return None;
    }
    let coefficients = chol.solve(&(xc.transpose() * yc));
    Some(RidgeFit {
        intercept: y_mean,
        coefficients,
        x_mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeResult {
    pub lambda: f64,
    /// Held-out R^2 per target column from the cross-validated predictions
    /// at the chosen lambda.
    pub r2: Vec<f64>,
    /// Mean squared held-out error for every grid value actually tried.
    pub grid_errors: Vec<(f64, f64)>,
    /// Set when lambda = 0 gave a singular system and was dropped.
    pub dropped_zero: bool,
}

fn fold_bounds(n: usize, folds: usize, k: usize) -> (usize, usize) {
    (k * n / folds, (k + 1) * n / folds)
}

fn cv_predictions(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, folds: usize) -> Option<DMatrix<f64>> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, y.ncols());
    for k in 0..folds {
        let (lo, hi) = fold_bounds(n, folds, k);
        let train: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
        let xt = x.select_rows(&train);
        let yt = y.select_rows(&train);
        let fit = ridge_fit(&xt, &yt, lambda)?;
        let pred = fit.predict(&x.rows(lo, hi - lo).into_owned());
        out.rows_mut(lo, hi - lo).copy_from(&pred);
    }
    Some(out)
}

/// Picks lambda from the grid by K-fold (contiguous blocks) mean squared
/// error and reports the held-out R^2 at that lambda.
pub fn ridge_decode(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda_grid: &[f64], folds: usize) -> Result<RidgeResult> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("features have {} rows, targets {}", x.nrows(), y.nrows())));
    }
    if folds < 2 || folds > x.nrows() {
        return Err(Error::InvalidInput(format!("need 2 <= folds <= rows, got {folds}")));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidInput("lambda grid must be nonempty and nonnegative".into()));
    }
    let mut dropped_zero = false;
    let mut grid_errors = Vec::new();
    let mut best: Option<(f64, f64, DMatrix<f64>)> = None;
    for &lambda in lambda_grid {
        let Some(pred) = cv_predictions(x, y, lambda, folds) else {
            if lambda == 0.0 {
                dropped_zero = true;
                continue;
            }
            return Err(Error::Numerical(format!("ridge system singular at lambda {lambda}")));
        };
        let mse = (&pred - y).norm_squared() / y.len() as f64;
        grid_errors.push((lambda, mse));
        if best.as_ref().is_none_or(|(_, m, _)| mse < *m) {
            best = Some((lambda, mse, pred));
        }
    }
    let (lambda, _, pred) = best.ok_or_else(|| Error::Numerical("no usable lambda in the grid".into()))?;
    let r2 = (0..y.ncols())
        .map(|j| {
            let col = y.column(j);
            let mean = col.mean();
            let tss = col.map(|v| (v - mean).powi(2)).sum();
            let sse = (pred.column(j) - col).norm_squared();
            if tss > 0.0 {
                1.0 - sse / tss
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(RidgeResult {
        lambda,
        r2,
        grid_errors,
        dropped_zero,
    })
}
