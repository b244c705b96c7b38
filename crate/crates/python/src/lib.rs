//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

use oslmm::cli::{PosteriorArchive, RunConfig};
use oslmm::evaluation::{self, LatentKind};
use oslmm::kernels::{self, KernelParams};
use oslmm::model::{self, AmbientMatrix};
use oslmm::samplers::{run_chain, ModelKind, PosteriorSamples, SamplerRng};
use oslmm::synthetic::{self, DgpConfig, MdgpConfig, ScaleKernel};

create_exception!(pyoslmm, OslmmError, PyException);

fn err(e: oslmm::Error) -> PyErr {
    OslmmError::new_err(e.to_string())
}

/// Row-major nested lists to a matrix; every row must have the same length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!("row {i} has {} entries, expected {ncols}", r.len()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    matrix_from_rows(rows).map_err(OslmmError::new_err)
}

fn parse_model(name: &str) -> PyResult<ModelKind> {
    match name {
        "oslmm" => Ok(ModelKind::Oslmm),
        "slmm" => Ok(ModelKind::Slmm),
        other => Err(OslmmError::new_err(format!("unknown model {other:?}"))),
    }
}

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Oslmm => "oslmm",
        ModelKind::Slmm => "slmm",
    }
}

fn parse_scale_kernel(name: &str) -> PyResult<ScaleKernel> {
    match name {
        "short" => Ok(ScaleKernel::Short),
        "median" => Ok(ScaleKernel::Median),
        "long" => Ok(ScaleKernel::Long),
        other => Err(OslmmError::new_err(format!("unknown scale kernel {other:?}"))),
    }
}

/// One trial: time stamps and a channels x times observation matrix.
#[pyclass(name = "Dataset", module = "pyoslmm", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: model::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(times: Vec<f64>, observations: Vec<Vec<f64>>) -> PyResult<Self> {
        let y = to_matrix(&observations)?;
        Ok(Self {
            inner: model::Dataset::new(times, y).map_err(err)?,
        })
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    #[getter]
    fn observations(&self) -> Vec<Vec<f64>> {
        rows_from_matrix(self.inner.observations())
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels()
    }

    #[getter]
    fn n_times(&self) -> usize {
        self.inner.n_times()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n_channels={}, n_times={})", self.inner.n_channels(), self.inner.n_times())
    }
}

fn unwrap_datasets(data: &[PyRef<'_, PyDataset>]) -> Vec<model::Dataset> {
    data.iter().map(|d| d.inner.clone()).collect()
}

/// A generated trial together with its ground truth.
#[pyclass(name = "SyntheticBundle", module = "pyoslmm", frozen)]
pub struct PyBundle {
    inner: synthetic::SyntheticBundle,
}

#[pymethods]
impl PyBundle {
    #[getter]
    fn dataset(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.dataset.clone(),
        }
    }

    #[getter]
    fn latents(&self) -> Vec<Vec<f64>> {
        rows_from_matrix(&self.inner.latents.0)
    }

    #[getter]
    fn log_scales(&self) -> Vec<Vec<f64>> {
        rows_from_matrix(&self.inner.log_scales.0)
    }

    #[getter]
    fn basis(&self) -> Vec<Vec<f64>> {
        rows_from_matrix(self.inner.basis.values())
    }

    /// `exp(h) * f`, the latents as seen through the basis.
    fn orthonormalized_latents(&self) -> PyResult<Vec<Vec<f64>>> {
        let c = model::orthonormalized_latents(&self.inner.log_scales, &self.inner.latents).map_err(err)?;
        Ok(rows_from_matrix(&c.0))
    }
}

fn dgp_config(n_times: usize, n_channels: usize, scale_kernel: &str, noise_std: f64, seed: u64) -> PyResult<DgpConfig> {
    Ok(DgpConfig {
        n_times,
        n_channels,
        scale_kernel: parse_scale_kernel(scale_kernel)?,
        noise_std,
        seed,
        ..DgpConfig::default()
    })
}

#[pyfunction]
#[pyo3(signature = (n_times=200, n_channels=50, scale_kernel="median", noise_std=0.1, seed=0))]
fn generate_dgp(n_times: usize, n_channels: usize, scale_kernel: &str, noise_std: f64, seed: u64) -> PyResult<PyBundle> {
    let cfg = dgp_config(n_times, n_channels, scale_kernel, noise_std, seed)?;
    let mut rng = SamplerRng::seed_from_u64(seed);
    Ok(PyBundle {
        inner: synthetic::generate_dgp(&cfg, &mut rng).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (n_trials=20, perturb_sigma=0.01, n_times=200, n_channels=50, scale_kernel="median", noise_std=0.1, seed=0))]
fn generate_mdgp(
    n_trials: usize,
    perturb_sigma: f64,
    n_times: usize,
    n_channels: usize,
    scale_kernel: &str,
    noise_std: f64,
    seed: u64,
) -> PyResult<Vec<PyBundle>> {
    let cfg = MdgpConfig {
        base: dgp_config(n_times, n_channels, scale_kernel, noise_std, seed)?,
        n_trials,
        perturb_sigma,
    };
    let mut rng = SamplerRng::seed_from_u64(seed);
    let (_, bundles) = synthetic::generate_mdgp(&cfg, &mut rng).map_err(err)?;
    Ok(bundles.into_iter().map(|inner| PyBundle { inner }).collect())
}

/// Stored posterior samples plus the configuration that produced them.
#[pyclass(name = "Posterior", module = "pyoslmm", frozen)]
pub struct PyPosterior {
    config: RunConfig,
    samples: PosteriorSamples,
}

#[pymethods]
impl PyPosterior {
    #[getter]
    fn model(&self) -> &'static str {
        model_name(self.samples.kind)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.samples.len()
    }

    #[getter]
    fn log_density(&self) -> Vec<f64> {
        self.samples.log_density.clone()
    }

    /// Mean seconds per sweep; 0 for a posterior loaded from disk.
    #[getter]
    fn mean_sweep_seconds(&self) -> f64 {
        self.samples.mean_sweep_seconds()
    }

    #[pyo3(signature = (trial=0, orthonormalized=true))]
    fn mean_latents(&self, trial: usize, orthonormalized: bool) -> PyResult<Vec<Vec<f64>>> {
        let kind = if orthonormalized {
            LatentKind::Orthonormalized
        } else {
            LatentKind::Raw
        };
        let m = evaluation::posterior_mean_latents(&self.samples, trial, kind).map_err(err)?;
        Ok(rows_from_matrix(&m))
    }

    /// Held-out prediction of one channel of `data` from the others.
    fn loco_predict(&self, data: PyRef<'_, PyDataset>, channel: usize) -> PyResult<Vec<f64>> {
        evaluation::loco_predict(&self.samples, &data.inner, channel).map_err(err)
    }

    /// Writes the posterior archive and returns its sample checksum.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        let archive = PosteriorArchive::new(self.config.clone(), self.samples.clone()).map_err(err)?;
        archive.write(&path).map_err(err)?;
        Ok(archive.sample_checksum().to_string())
    }
}

#[pyfunction]
#[pyo3(signature = (data, model="oslmm", latent_dim=3, iterations=500, burnin=200, thinning=1, seed=0))]
fn fit(
    data: Vec<PyRef<'_, PyDataset>>,
    model: &str,
    latent_dim: usize,
    iterations: usize,
    burnin: usize,
    thinning: usize,
    seed: u64,
) -> PyResult<PyPosterior> {
    let mut config = RunConfig::new(parse_model(model)?, latent_dim);
    config.iterations = iterations;
    config.burnin = burnin;
    config.thinning = thinning;
    config.seed = Some(seed);
    let data = unwrap_datasets(&data);
    let init = config.initial_state(&data).map_err(err)?;
    let chain = config.chain_config().map_err(err)?;
    let samples = run_chain(config.model, &data, &chain, &config.priors, init).map_err(err)?;
    Ok(PyPosterior { config, samples })
}

#[pyfunction]
fn load_archive(path: PathBuf) -> PyResult<PyPosterior> {
    let a = PosteriorArchive::read(&path).map_err(err)?;
    Ok(PyPosterior {
        config: a.header.run_config,
        samples: a.posterior,
    })
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PyDataset>> {
    let trials = oslmm::cli::io::read_dataset_csv(&path).map_err(err)?;
    Ok(trials.into_iter().map(|inner| PyDataset { inner }).collect())
}

#[pyfunction]
fn write_dataset(path: PathBuf, data: Vec<PyRef<'_, PyDataset>>) -> PyResult<()> {
    let bytes = oslmm::cli::io::write_dataset_csv(&unwrap_datasets(&data)).map_err(err)?;
    oslmm::cli::io::write_atomic(&path, &bytes).map_err(err)
}

#[pyfunction]
fn se_kernel(t1: f64, t2: f64, variance: f64, length_scale: f64) -> PyResult<f64> {
    let p = KernelParams::new(variance, length_scale).map_err(err)?;
    kernels::se_kernel(t1, t2, &p).map_err(err)
}

/// Solves `T x = rhs` for the symmetric Toeplitz `T` with the given first row.
#[pyfunction]
fn toeplitz_solve(first_row: Vec<f64>, rhs: Vec<f64>) -> PyResult<Vec<f64>> {
    let b = DMatrix::from_column_slice(rhs.len(), 1, &rhs);
    let x = kernels::toeplitz_solve(&first_row, &b).map_err(err)?;
    Ok(x.iter().copied().collect())
}

#[pyfunction]
fn polar_orthonormalize(v: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let u = model::polar_orthonormalize(&AmbientMatrix(to_matrix(&v)?)).map_err(err)?;
    Ok(rows_from_matrix(u.values()))
}

/// Rotates `estimate` onto `truth`; returns the aligned rows and the RMSE.
#[pyfunction]
fn procrustes_align(estimate: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let al = evaluation::procrustes_align(&to_matrix(&estimate)?, &to_matrix(&truth)?).map_err(err)?;
    Ok((rows_from_matrix(&al.aligned), al.residual_rmse))
}

#[pyfunction]
fn summary_stats<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let s = evaluation::summary_stats(&a, &b).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("spearman_rho", s.spearman_rho)?;
    d.set_item("paired_t_p", s.paired_t_p)?;
    d.set_item("wilcoxon_p", s.wilcoxon_p)?;
    Ok(d)
}

#[pymodule]
fn pyoslmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OslmmError", m.py().get_type::<OslmmError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(generate_dgp, m)?)?;
    m.add_function(wrap_pyfunction!(generate_mdgp, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(load_archive, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(se_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(toeplitz_solve, m)?)?;
    m.add_function(wrap_pyfunction!(polar_orthonormalize, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_align, m)?)?;
    m.add_function(wrap_pyfunction!(summary_stats, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let m = matrix_from_rows(&rows).unwrap();
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(rows_from_matrix(&m), rows);
        assert!(matrix_from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert_eq!(matrix_from_rows(&[]).unwrap().shape(), (0, 0));
    }

    #[test]
    fn names_parse() {
        assert_eq!(parse_model("slmm").ok(), Some(ModelKind::Slmm));
        assert_eq!(model_name(ModelKind::Oslmm), "oslmm");
        assert_eq!(parse_scale_kernel("long").ok(), Some(ScaleKernel::Long));
    }
}
