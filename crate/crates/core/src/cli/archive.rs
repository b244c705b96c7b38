//! Posterior archive: one JSON header line followed by a little-endian f64
//! body. The header records the run configuration, the shapes needed to
//! decode the body and the body's SHA-256.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::model::{AmbientMatrix, LatentMatrix, LogScaleMatrix, MixingField, StiefelBasis};
use crate::samplers::hyper::Adaptation;
use crate::samplers::{GibbsState, ModelKind, OslmmState, PosteriorSamples, SlmmState};

pub const ARCHIVE_FORMAT: &str = "oslmm-posterior";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveHeader {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub run_config: RunConfig,
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_latents: usize,
    pub n_times: usize,
    pub n_samples: usize,
    pub n_iterations: usize,
    pub body_bytes: usize,
    pub body_sha256: String,
}

#[derive(Debug, Clone)]
pub struct PosteriorArchive {
    pub header: ArchiveHeader,
    pub posterior: PosteriorSamples,
}

fn push_matrix(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    out.extend_from_slice(m.as_slice());
}

fn push_kernel(out: &mut Vec<f64>, k: &KernelParams) {
    out.extend([k.variance, k.length_scale]);
}

fn push_adapt(out: &mut Vec<f64>, a: &Adaptation) {
    out.extend([
        a.log_step,
        a.batch_accepted as f64,
        a.batch_proposed as f64,
        a.batches as f64,
        a.accepted as f64,
        a.proposed as f64,
    ]);
}

struct Cursor<'a> {
    values: &'a [f64],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[f64]> {
        let end = self.pos + n;
        let s = self
            .values
            .get(self.pos..end)
            .ok_or_else(|| Error::Data("archive body is shorter than its header declares".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn scalar(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }

    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_column_slice(r, c, self.take(r * c)?))
    }

    fn kernel(&mut self) -> Result<KernelParams> {
        let v = self.take(2)?;
        KernelParams::new(v[0], v[1]).map_err(|e| Error::Data(format!("archive kernel: {e}")))
    }

    fn adapt(&mut self) -> Result<Adaptation> {
        let v = self.take(6)?;
        Ok(Adaptation {
            log_step: v[0],
            batch_accepted: v[1] as u32,
            batch_proposed: v[2] as u32,
            batches: v[3] as u32,
            accepted: v[4] as u64,
            proposed: v[5] as u64,
        })
    }
}

fn shapes(state: &GibbsState) -> (usize, usize, usize, usize) {
    let lat = state.latents();
    let (q, t) = lat.first().map(|f| f.0.shape()).unwrap_or((0, 0));
    let p = match state {
        GibbsState::Oslmm(s) => s.basis().n_channels(),
        GibbsState::Slmm(s) => s.mixing.n_channels(),
    };
    (lat.len(), p, q, t)
}

fn encode_state(out: &mut Vec<f64>, state: &GibbsState) {
    match state {
        GibbsState::Oslmm(s) => {
            push_matrix(out, &s.ambient().0);
            push_matrix(out, s.basis().values());
            push_matrix(out, &s.log_scales.0);
            for f in &s.latents {
                push_matrix(out, &f.0);
            }
            out.push(s.noise_variance);
            push_kernel(out, &s.f_kernel);
            push_kernel(out, &s.h_kernel);
            push_adapt(out, &s.f_adapt);
            push_adapt(out, &s.h_adapt);
        }
        GibbsState::Slmm(s) => {
            push_matrix(out, s.mixing.series());
            for f in &s.latents {
                push_matrix(out, &f.0);
            }
            out.extend_from_slice(&s.noise);
            push_kernel(out, &s.f_kernel);
            push_kernel(out, &s.w_kernel);
            push_adapt(out, &s.f_adapt);
            push_adapt(out, &s.w_adapt);
        }
    }
}

fn decode_state(c: &mut Cursor<'_>, h: &ArchiveHeader) -> Result<GibbsState> {
    let (n, p, q, t) = (h.n_trials, h.n_channels, h.n_latents, h.n_times);
    let bad = |e: Error| Error::Data(format!("archive sample is invalid: {e}"));
    Ok(match h.kind {
        ModelKind::Oslmm => {
            let v = AmbientMatrix(c.matrix(p, q)?);
            let u = StiefelBasis::new(c.matrix(p, q)?).map_err(bad)?;
            let hs = LogScaleMatrix(c.matrix(q, t)?);
            let latents = (0..n).map(|_| c.matrix(q, t).map(LatentMatrix)).collect::<Result<Vec<_>>>()?;
            let noise = c.scalar()?;
            let (fk, hk) = (c.kernel()?, c.kernel()?);
            let mut s = OslmmState::from_parts(latents, hs, v, u, noise, fk, hk).map_err(bad)?;
            s.f_adapt = c.adapt()?;
            s.h_adapt = c.adapt()?;
            GibbsState::Oslmm(s)
        }
        ModelKind::Slmm => {
            let w = MixingField::from_series(p, q, c.matrix(p * q, t)?).map_err(bad)?;
            let latents = (0..n).map(|_| c.matrix(q, t).map(LatentMatrix)).collect::<Result<Vec<_>>>()?;
            let noise = c.take(p)?.to_vec();
            let (fk, wk) = (c.kernel()?, c.kernel()?);
            let mut s = SlmmState::new(latents, w, noise, fk, wk).map_err(bad)?;
            s.f_adapt = c.adapt()?;
            s.w_adapt = c.adapt()?;
            GibbsState::Slmm(s)
        }
    })
}

impl PosteriorArchive {
    pub fn new(run_config: RunConfig, posterior: PosteriorSamples) -> Result<Self> {
        let first = posterior
            .samples
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot archive an empty posterior".into()))?;
        let (n_trials, n_channels, n_latents, n_times) = shapes(first);
        let body = Self::body_values(&posterior);
        let header = ArchiveHeader {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            kind: posterior.kind,
            run_config,
            n_trials,
            n_channels,
            n_latents,
            n_times,
            n_samples: posterior.samples.len(),
            n_iterations: posterior.log_density.len(),
            body_bytes: body.len() * 8,
            body_sha256: sha256_hex(&to_le_bytes(&body)),
        };
        Ok(Self { header, posterior })
    }

    fn body_values(posterior: &PosteriorSamples) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &posterior.samples {
            encode_state(&mut out, s);
        }
        out.extend_from_slice(&posterior.log_density);
        out
    }

    /// Checksum over all stored samples and the log-density trace.
    pub fn sample_checksum(&self) -> &str {
        &self.header.body_sha256
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.extend(to_le_bytes(&Self::body_values(&self.posterior)));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Data("archive has no header line".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Data(format!("archive header is not JSON: {e}")))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(ARCHIVE_FORMAT) {
            return Err(Error::Data("not a posterior archive".into()));
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == ARCHIVE_VERSION as u64 => {}
            other => {
                return Err(Error::Data(format!(
                    "archive version {other:?} is not supported (expected {ARCHIVE_VERSION})"
                )))
            }
        }
        let header: ArchiveHeader =
            serde_json::from_value(raw).map_err(|e| Error::Data(format!("archive header: {e}")))?;
        let body = &bytes[nl + 1..];
        if body.len() != header.body_bytes || !body.len().is_multiple_of(8) {
            return Err(Error::Data(format!(
                "archive body has {} bytes, header declares {}",
                body.len(),
                header.body_bytes
            )));
        }
        if sha256_hex(body) != header.body_sha256 {
            return Err(Error::Data("archive checksum mismatch".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut cur = Cursor {
            values: &values,
            pos: 0,
        };
        let samples = (0..header.n_samples)
            .map(|_| decode_state(&mut cur, &header))
            .collect::<Result<Vec<_>>>()?;
        let log_density = cur.take(header.n_iterations)?.to_vec();
        if cur.pos != values.len() {
            return Err(Error::Data("archive body has trailing values".into()));
        }
        let posterior = PosteriorSamples {
            kind: header.kind,
            config: header.run_config.chain_config()?,
            samples,
            log_density,
            sweep_seconds: Vec::new(),
        };
        Ok(Self { header, posterior })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Parse {
                path: path.display().to_string(),
                message: m,
            },
            other => other,
        })
    }
}

fn to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dataset;
    use crate::samplers::{run_chain, HyperPriors};

    fn toy() -> Vec<Dataset> {
        (0..2)
            .map(|k| {
                let y = DMatrix::from_fn(4, 6, |p, t| ((p + 1) as f64 * 0.7 * t as f64 + k as f64).sin());
                Dataset::new((0..6).map(|t| t as f64).collect(), y).unwrap()
            })
            .collect()
    }

    fn fitted(kind: ModelKind) -> (RunConfig, PosteriorSamples) {
        let data = toy();
        let mut rc = RunConfig::new(kind, 2);
        rc.iterations = 6;
        rc.burnin = 2;
        rc.seed = Some(5);
        let init = rc.initial_state(&data).unwrap();
        let post = run_chain(kind, &data, &rc.chain_config().unwrap(), &HyperPriors::default(), init).unwrap();
        (rc, post)
    }

    #[test]
    fn round_trip_both_models() {
        for kind in [ModelKind::Oslmm, ModelKind::Slmm] {
            let (rc, post) = fitted(kind);
            let a = PosteriorArchive::new(rc.clone(), post.clone()).unwrap();
            let back = PosteriorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
            assert_eq!(back.header, a.header);
            assert_eq!(back.header.run_config, rc);
            assert_eq!(back.posterior.samples, post.samples);
            assert_eq!(back.posterior.log_density, post.log_density);
            assert_eq!(back.posterior.config, post.config);
        }
    }

    #[test]
    fn rejects_version_and_corruption() {
        let (rc, post) = fitted(ModelKind::Oslmm);
        let bytes = PosteriorArchive::new(rc, post).unwrap().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|b| *b == b'\n').unwrap()]).to_string();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        let mut v2 = bumped.into_bytes();
        v2.extend_from_slice(&bytes[text.len()..]);
        let err = PosteriorArchive::from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(PosteriorArchive::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(PosteriorArchive::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
