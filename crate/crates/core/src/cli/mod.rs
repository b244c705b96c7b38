//! Command-line front end: `generate`, `fit` and `eval`, plus the file
//! formats they read and write.

pub mod archive;
pub mod config;
pub mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use archive::{ArchiveHeader, PosteriorArchive, ARCHIVE_FORMAT, ARCHIVE_VERSION};
pub use config::{resolve_seed, GenerateConfig, InitialValues, Process, RunConfig, SEED_ENV};

use crate::error::{Error, Result};
use crate::evaluation::{
    loco_predict, loco_report, posterior_mean_latents, procrustes_align, recovery_correlations, summary_stats,
    EvalReport, LatentKind,
};
use crate::model::Dataset;
use crate::samplers::{check_trials, run_chain, ModelKind, PosteriorSamples, SamplerRng};
use crate::synthetic::{generate_dgp, generate_mdgp, SyntheticBundle};
use config::relative_to;
use io::{fmt_f64, read_dataset_csv, read_series_table, sha256_hex, time_index, write_atomic, write_table, TableBlock};

#[derive(Debug, Parser)]
#[command(name = "oslmm", version, about = "Orthogonal stochastic linear mixing models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Lorenz bundle (DGP or MDGP).
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the sampler and write a posterior archive.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Archive path; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a posterior archive.
    Eval {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Latent trajectories of a competing method (`trial,time,latent_*`).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Directory holding the ground-truth files; defaults to the data
        /// file's directory.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Report directory; defaults to the archive's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Recovery,
    Loco,
    Compare,
}

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_LATENTS_FILE: &str = "truth_latents.csv";
pub const TRUTH_LOG_SCALES_FILE: &str = "truth_log_scales.csv";
pub const TRUTH_BASIS_FILE: &str = "truth_basis.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_ARCHIVE: &str = "posterior.archive";

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn matrix_checksum(m: &DMatrix<f64>) -> String {
    let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub seed: u64,
}

/// Writes the dataset, ground truth and a manifest into the configured
/// output directory.
pub fn cmd_generate(config_path: &Path) -> Result<GenerateOutput> {
    let mut cfg = GenerateConfig::read(config_path)?;
    let seed = resolve_seed(cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.dgp.seed = seed;
    let mut rng = SamplerRng::seed_from_u64(seed);
    let bundles: Vec<SyntheticBundle> = match cfg.mdgp()? {
        None => vec![generate_dgp(&cfg.dgp, &mut rng)?],
        Some(m) => generate_mdgp(&m, &mut rng)?.1,
    };
    let dir = relative_to(config_path, cfg.output_dir.as_deref().unwrap_or(Path::new(".")));

    let datasets: Vec<Dataset> = bundles.iter().map(|b| b.dataset.clone()).collect();
    let series = |f: &dyn Fn(&SyntheticBundle) -> &DMatrix<f64>, prefix: &str| {
        let blocks: Vec<TableBlock<'_>> = bundles
            .iter()
            .map(|b| TableBlock {
                index: time_index(b.dataset.times()),
                values: f(b),
            })
            .collect();
        write_table("time", prefix, &blocks)
    };
    let basis_t: Vec<DMatrix<f64>> = bundles.iter().map(|b| b.basis.values().transpose()).collect();
    let basis_blocks: Vec<TableBlock<'_>> = basis_t
        .iter()
        .map(|m| TableBlock {
            index: (0..m.ncols()).map(|p| p.to_string()).collect(),
            values: m,
        })
        .collect();
    let contents = [
        (DATA_FILE, io::write_dataset_csv(&datasets)?),
        (TRUTH_LATENTS_FILE, series(&|b| &b.latents.0, "latent")?),
        (TRUTH_LOG_SCALES_FILE, series(&|b| &b.log_scales.0, "log_scale")?),
        (TRUTH_BASIS_FILE, write_table("channel", "basis", &basis_blocks)?),
    ];

    let mut files = Vec::new();
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &contents {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
        files.push(path);
    }
    let manifest = json!({
        "format": "oslmm-bundle",
        "version": 1,
        "seed": seed,
        "config": cfg,
        "n_trials": bundles.len(),
        "files": checksums,
        "basis_checksums": bundles.iter().map(|b| matrix_checksum(b.basis.values())).collect::<Vec<_>>(),
    });
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, &json_bytes(&manifest)?)?;
    files.push(path);
    Ok(GenerateOutput { dir, files, seed })
}

/// Per-iteration wall-clock summary in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl TimingSummary {
    pub fn from_seconds(seconds: &[f64]) -> Self {
        if seconds.is_empty() {
            return Self {
                mean: 0.0,
                p50: 0.0,
                p95: 0.0,
            };
        }
        let mut s = seconds.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub archive: PathBuf,
    pub n_samples: usize,
    pub checksum: String,
    pub timing: TimingSummary,
}

/// Fits the configured model and writes the archive.
pub fn cmd_fit(config_path: &Path, data_path: &Path, out: Option<&Path>) -> Result<FitOutput> {
    let mut rc = RunConfig::read(config_path)?;
    rc.seed = Some(resolve_seed(rc.seed)?);
    rc.validate()?;
    let data = read_dataset_csv(data_path)?;
    check_trials(&data)?;
    let init = rc.initial_state(&data)?;
    let posterior = run_chain(rc.model, &data, &rc.chain_config()?, &rc.priors, init)?;
    let timing = TimingSummary::from_seconds(&posterior.sweep_seconds);
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => relative_to(config_path, rc.output.as_deref().unwrap_or(Path::new(DEFAULT_ARCHIVE))),
    };
    let archive = PosteriorArchive::new(rc, posterior)?;
    archive.write(&path)?;
    Ok(FitOutput {
        archive: path,
        n_samples: archive.header.n_samples,
        checksum: archive.sample_checksum().to_string(),
        timing,
    })
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub archive: PathBuf,
    pub data: PathBuf,
    pub task: EvalTask,
    pub baseline: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn check_compatible(header: &ArchiveHeader, data: &[Dataset]) -> Result<()> {
    let (p, t) = check_trials(data)?;
    if (header.n_trials, header.n_channels, header.n_times) != (data.len(), p, t) {
        return Err(Error::Data(format!(
            "archive holds {} trials of {} channels x {} times; dataset has {} x {} x {}",
            header.n_trials,
            header.n_channels,
            header.n_times,
            data.len(),
            p,
            t
        )));
    }
    Ok(())
}

/// Scale-absorbed true latents `exp(h) * f` for every trial.
fn read_truth(dir: &Path, n_trials: usize) -> Result<Vec<DMatrix<f64>>> {
    let f = read_series_table(&dir.join(TRUTH_LATENTS_FILE), "latent")?;
    let h = read_series_table(&dir.join(TRUTH_LOG_SCALES_FILE), "log_scale")?;
    if f.len() != n_trials || h.len() != n_trials {
        return Err(Error::Data(format!(
            "ground truth has {} / {} trials, dataset has {n_trials}",
            f.len(),
            h.len()
        )));
    }
    f.into_iter()
        .zip(h)
        .map(|((_, f), (_, h))| {
            if f.shape() != h.shape() {
                return Err(Error::Shape("true latents and log-scales differ in shape".into()));
            }
            Ok(f.zip_map(&h, |f, h| h.exp() * f))
        })
        .collect()
}

/// Latents compared against the truth: orthonormalized for OSLMM, the raw
/// latents for SLMM.
fn estimate_kind(kind: ModelKind) -> LatentKind {
    match kind {
        ModelKind::Oslmm => LatentKind::Orthonormalized,
        ModelKind::Slmm => LatentKind::Raw,
    }
}

fn aligned_rmse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    Ok(procrustes_align(estimate, truth)?.residual_rmse)
}

fn recovery(posterior: &PosteriorSamples, truth: &[DMatrix<f64>], dir: &Path) -> Result<Vec<PathBuf>> {
    let kind = estimate_kind(posterior.kind);
    let mut reports = Vec::new();
    let mut aligned = Vec::new();
    for (i, c) in truth.iter().enumerate() {
        let est = posterior_mean_latents(posterior, i, kind)?;
        let al = procrustes_align(&est, c)?;
        reports.push(EvalReport {
            rmse: Some(al.residual_rmse),
            correlations: Some(recovery_correlations(&est, c)?),
            ..Default::default()
        });
        aligned.push(al.aligned);
    }
    let n = reports.len() as f64;
    let mean_rmse = reports.iter().filter_map(|r| r.rmse).sum::<f64>() / n;
    let report = json!({
        "task": EvalTask::Recovery,
        "model": posterior.kind,
        "latents": kind,
        "mean_rmse": mean_rmse,
        "trials": reports,
    });
    let times: Vec<String> = (0..truth[0].ncols()).map(|t| t.to_string()).collect();
    let blocks: Vec<TableBlock<'_>> = aligned
        .iter()
        .map(|m| TableBlock {
            index: times.clone(),
            values: m,
        })
        .collect();
    let json_path = dir.join("recovery.json");
    let csv_path = dir.join("recovery_latents.csv");
    write_atomic(&json_path, &json_bytes(&report)?)?;
    write_atomic(&csv_path, &write_table("time_index", "latent", &blocks)?)?;
    Ok(vec![json_path, csv_path])
}

fn loco(posterior: &PosteriorSamples, data: &[Dataset], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    csv.write_record(["trial", "channel", "sse", "r2"]).map_err(csv_err)?;
    let mut reports = Vec::new();
    let (mut sse_sum, mut r2_sum, mut r2_n) = (0.0, 0.0, 0usize);
    for (i, trial) in data.iter().enumerate() {
        let (p, t) = (trial.n_channels(), trial.n_times());
        let mut pred = DMatrix::zeros(p, t);
        for ch in 0..p {
            let row = loco_predict(posterior, trial, ch)?;
            pred.row_mut(ch).iter_mut().zip(row).for_each(|(d, v)| *d = v);
        }
        let rep = loco_report(&pred, trial.observations())?;
        for ch in 0..p {
            let r2 = rep.r2[ch].map(fmt_f64).unwrap_or_default();
            csv.write_record([i.to_string(), ch.to_string(), fmt_f64(rep.sse[ch]), r2])
                .map_err(csv_err)?;
            sse_sum += rep.sse[ch];
            if let Some(r) = rep.r2[ch] {
                r2_sum += r;
                r2_n += 1;
            }
        }
        reports.push(EvalReport {
            sse: Some(rep.sse),
            r2: Some(rep.r2),
            ..Default::default()
        });
    }
    let cells: usize = data.iter().map(|d| d.n_channels()).sum();
    let report = json!({
        "task": EvalTask::Loco,
        "model": posterior.kind,
        "mean_sse": sse_sum / cells as f64,
        "mean_r2": if r2_n > 0 { Some(r2_sum / r2_n as f64) } else { None },
        "trials": reports,
    });
    let csv_path = dir.join("loco.csv");
    let json_path = dir.join("loco.json");
    write_atomic(&csv_path, &csv.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    write_atomic(&json_path, &json_bytes(&report)?)?;
    Ok(vec![csv_path, json_path])
}

fn compare(
    posterior: &PosteriorSamples,
    truth: &[DMatrix<f64>],
    baseline_path: &Path,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let baseline = read_series_table(baseline_path, "latent")?;
    if baseline.len() != truth.len() {
        return Err(Error::Data(format!(
            "baseline has {} trials, ground truth {}",
            baseline.len(),
            truth.len()
        )));
    }
    let kind = estimate_kind(posterior.kind);
    let (mut model_rmse, mut base_rmse, mut reports) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (c, (_, b))) in truth.iter().zip(&baseline).enumerate() {
        let m = aligned_rmse(&posterior_mean_latents(posterior, i, kind)?, c)?;
        let r = aligned_rmse(b, c)?;
        reports.push(json!({
            "trial": i,
            "model_rmse": m,
            "baseline_rmse": r,
            "delta_rmse": crate::evaluation::delta_rmse(m, r),
        }));
        model_rmse.push(m);
        base_rmse.push(r);
    }
    // Paired statistics across trials need at least three of them.
    let stats = if truth.len() >= 3 {
        Some(summary_stats(&model_rmse, &base_rmse)?)
    } else {
        None
    };
    let n = truth.len() as f64;
    let summary = EvalReport {
        rmse: Some(model_rmse.iter().sum::<f64>() / n),
        delta_rmse: Some(model_rmse.iter().zip(&base_rmse).map(|(a, b)| a - b).sum::<f64>() / n),
        spearman_rho: stats.and_then(|s| s.spearman_rho),
        t_p_value: stats.and_then(|s| s.paired_t_p),
        wilcoxon_p_value: stats.and_then(|s| s.wilcoxon_p),
        ..Default::default()
    };
    let report = json!({
        "task": EvalTask::Compare,
        "model": posterior.kind,
        "latents": kind,
        "summary": summary,
        "summary_stats": stats,
        "trials": reports,
    });
    let path = dir.join("compare.json");
    write_atomic(&path, &json_bytes(&report)?)?;
    Ok(vec![path])
}

/// Runs one evaluation task and returns the files written.
pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<PathBuf>> {
    let archive = PosteriorArchive::read(&args.archive)?;
    let data = read_dataset_csv(&args.data)?;
    check_compatible(&archive.header, &data)?;
    let dir = args.out.clone().unwrap_or_else(|| parent_dir(&args.archive));
    let truth_dir = args.truth.clone().unwrap_or_else(|| parent_dir(&args.data));
    let posterior = &archive.posterior;
    match args.task {
        EvalTask::Recovery => recovery(posterior, &read_truth(&truth_dir, data.len())?, &dir),
        EvalTask::Loco => loco(posterior, &data, &dir),
        EvalTask::Compare => {
            let baseline = args
                .baseline
                .as_deref()
                .ok_or_else(|| Error::Config("--task compare needs --baseline".into()))?;
            compare(posterior, &read_truth(&truth_dir, data.len())?, baseline, &dir)
        }
    }
}

/// Executes a parsed command line, reporting progress on stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config } => {
            let out = cmd_generate(&config)?;
            eprintln!("generated {} files in {} (seed {})", out.files.len(), out.dir.display(), out.seed);
        }
        Command::Fit { config, data, out } => {
            let r = cmd_fit(&config, &data, out.as_deref())?;
            eprintln!(
                "timing per iteration: mean {:.6}s p50 {:.6}s p95 {:.6}s",
                r.timing.mean, r.timing.p50, r.timing.p95
            );
            eprintln!("wrote {} ({} samples, sha256 {})", r.archive.display(), r.n_samples, r.checksum);
        }
        Command::Eval {
            archive,
            data,
            task,
            baseline,
            truth,
            out,
        } => {
            let files = cmd_eval(&EvalArgs {
                archive,
                data,
                task,
                baseline,
                truth,
                out,
            })?;
            for f in files {
                eprintln!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
