//! CSV tables and atomic file writes.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Scientific notation with 17 significant digits; parses back to the same
/// double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// One block of a long-format table: the index column values and a
/// K x N matrix whose columns are the rows of the table.
pub struct TableBlock<'a> {
    pub index: Vec<String>,
    pub values: &'a DMatrix<f64>,
}

/// `trial,<index_name>,<prefix>_1..<prefix>_K`, one row per column of each
/// block, trials numbered from 0.
pub fn write_table(index_name: &str, prefix: &str, blocks: &[TableBlock<'_>]) -> Result<Vec<u8>> {
    let k = blocks.first().map(|b| b.values.nrows()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial".to_string(), index_name.to_string()];
    header.extend((1..=k).map(|i| format!("{prefix}_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (trial, b) in blocks.iter().enumerate() {
        if b.values.nrows() != k || b.values.ncols() != b.index.len() {
            return Err(Error::Shape("table blocks must share their row count".into()));
        }
        for (j, idx) in b.index.iter().enumerate() {
            let mut rec = vec![trial.to_string(), idx.clone()];
            rec.extend(b.values.column(j).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

pub fn time_index(times: &[f64]) -> Vec<String> {
    times.iter().map(|t| fmt_f64(*t)).collect()
}

/// Reads a `trial,time,<prefix>_1..` table into per-trial (times, K x T)
/// blocks. Trials must appear as contiguous groups numbered 0, 1, ...
pub fn read_series_table(path: &Path, prefix: &str) -> Result<Vec<(Vec<f64>, DMatrix<f64>)>> {
    let name = path.display().to_string();
    let perr = |message: String| Error::Parse {
        path: name.clone(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => perr(format!("{other:?}")),
    })?;
    let headers = rdr.headers().map_err(|e| perr(e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "trial" || &headers[1] != "time" {
        return Err(perr(format!(
            "header must start with trial,time followed by {prefix}_1..; got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    for (i, h) in headers.iter().enumerate().skip(2) {
        if h != format!("{prefix}_{}", i - 1) {
            return Err(perr(format!("column {}: expected {prefix}_{}, found {h:?}", i + 1, i - 1)));
        }
    }
    let k = headers.len() - 2;
    let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| perr(format!("row {row}: {e}")))?;
        if rec.len() != k + 2 {
            return Err(perr(format!("row {row}: expected {} fields, found {}", k + 2, rec.len())));
        }
        let trial: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| perr(format!("row {row}, column 1: invalid trial index {:?}", &rec[0])))?;
        if trial == blocks.len() {
            blocks.push((Vec::new(), Vec::new()));
        } else if trial + 1 != blocks.len() {
            return Err(perr(format!(
                "row {row}, column 1: trials must be contiguous and numbered from 0 (found {trial})"
            )));
        }
        let block = blocks.last_mut().expect("pushed above");
        let mut fields = rec.iter().enumerate().skip(1).map(|(c, s)| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| perr(format!("row {row}, column {}: not a number: {s:?}", c + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(format!("row {row}, column {}: non-finite value", c + 1)))
            }
        });
        block.0.push(fields.next().expect("time column")?);
        for v in fields {
            block.1.push(v?);
        }
    }
    if blocks.is_empty() {
        return Err(perr("table has no rows".into()));
    }
    Ok(blocks
        .into_iter()
        .map(|(times, vals)| {
            let t = times.len();
            (times, DMatrix::from_column_slice(k, t, &vals))
        })
        .collect())
}

pub fn write_dataset_csv(trials: &[Dataset]) -> Result<Vec<u8>> {
    let blocks: Vec<TableBlock<'_>> = trials
        .iter()
        .map(|d| TableBlock {
            index: time_index(d.times()),
            values: d.observations(),
        })
        .collect();
    write_table("time", "channel", &blocks)
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<Dataset>> {
    read_series_table(path, "channel")?
        .into_iter()
        .enumerate()
        .map(|(i, (times, y))| {
            Dataset::new(times, y).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("trial {i}: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = Dataset::new(vec![0.0, 1.0, 2.0], DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 / 7.0)).unwrap();
        let b = Dataset::new(vec![0.0, 1.0, 2.0], DMatrix::from_fn(2, 3, |i, j| -((i + j) as f64) / 3.0)).unwrap();
        let path = dir.path().join("d.csv");
        write_atomic(&path, &write_dataset_csv(&[a.clone(), b.clone()]).unwrap()).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back, vec![a, b]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("trial,time,channel_1,channel_2\n"));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "trial,time,channel_1\n0,0,1.0\n0,1,abc\n").unwrap();
        match read_dataset_csv(&bad) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("row 3, column 3"), "{message}"),
            r => panic!("unexpected {r:?}"),
        }
        std::fs::write(&bad, "trial,time,channel_1\n1,0,1.0\n").unwrap();
        assert!(read_dataset_csv(&bad).is_err());
        std::fs::write(&bad, "trial,t,channel_1\n0,0,1.0\n").unwrap();
        assert!(read_dataset_csv(&bad).is_err());
    }
}
