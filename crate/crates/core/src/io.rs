//! On-disk formats.
//!
//! A dataset directory holds `manifest.json`, `covariates.csv` (`N × p` with
//! a header row) and `subject_<i>.bin`, each `T` consecutive row-major
//! `n × n` matrices in the manifest's element type, little-endian.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Adjacency, DynamicNetworkDataset};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::network::SignalMatrix;

pub const MANIFEST: &str = "manifest.json";
pub const COVARIATES: &str = "covariates.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    U8,
    F64,
}

impl Storage {
    pub fn width(self) -> usize {
        match self {
            Storage::U8 => 1,
            Storage::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "N")]
    pub subjects: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub times: usize,
    pub p: usize,
    pub family: Family,
    pub time_grid: Vec<f64>,
    pub storage: Storage,
}

pub fn subject_file(i: usize) -> String {
    format!("subject_{i}.bin")
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_dataset(data: &DynamicNetworkDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, t) = (data.n_nodes(), data.n_times());
    let storage = match data.adjacency() {
        Adjacency::U8(_) => Storage::U8,
        Adjacency::F64(_) => Storage::F64,
    };
    let manifest = Manifest {
        subjects: data.n_subjects(),
        n,
        times: t,
        p: data.n_covariates(),
        family: data.family(),
        time_grid: data.time_grid().to_vec(),
        storage,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(COVARIATES);
    let header: Vec<String> = (0..manifest.p).map(|l| format!("x{l}")).collect();
    write_csv(&path, Some(&header), data.covariates())?;

    let block = t * n * n;
    for i in 0..data.n_subjects() {
        let bytes: Vec<u8> = match data.adjacency() {
            Adjacency::U8(v) => v[i * block..(i + 1) * block].to_vec(),
            Adjacency::F64(v) => v[i * block..(i + 1) * block]
                .iter()
                .flat_map(|x| x.to_le_bytes())
                .collect(),
        };
        let path = dir.join(subject_file(i));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<DynamicNetworkDataset> {
    let m = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST);
    if m.time_grid.len() != m.times {
        return Err(format_err(
            &manifest_path,
            format!("time_grid has {} points, T = {}", m.time_grid.len(), m.times),
        ));
    }
    let cov_path = dir.join(COVARIATES);
    let covariates = read_csv(&cov_path, true)?;
    if covariates.shape() != (m.subjects, m.p) {
        return Err(format_err(
            &cov_path,
            format!(
                "expected {}x{} covariates, found {}x{}",
                m.subjects,
                m.p,
                covariates.nrows(),
                covariates.ncols()
            ),
        ));
    }
    let block = m.times * m.n * m.n;
    let expected = block * m.storage.width();
    let mut u8s = Vec::new();
    let mut f64s = Vec::new();
    for i in 0..m.subjects {
        let path = dir.join(subject_file(i));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != expected {
            return Err(format_err(
                &path,
                format!("expected {expected} bytes (T·n²·{}), found {}", m.storage.width(), bytes.len()),
            ));
        }
        match m.storage {
            Storage::U8 => u8s.extend_from_slice(&bytes),
            Storage::F64 => f64s.extend(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
            ),
        }
    }
    let adjacency = match m.storage {
        Storage::U8 => Adjacency::U8(u8s),
        Storage::F64 => Adjacency::F64(f64s),
    };
    DynamicNetworkDataset::new(m.family, m.n, m.time_grid, adjacency, covariates)
}

/// Writes a numeric matrix as CSV with shortest round-trip formatting.
pub fn write_csv(path: &Path, header: Option<&[String]>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_err(path, e))?;
    }
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a rectangular numeric CSV, skipping one header row if asked.
pub fn read_csv(path: &Path, has_header: bool) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>()
                    .map_err(|_| format_err(path, format!("row {line}, column {c}: {f:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format_err(
                    path,
                    format!("row {line} has {} fields, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

const SIGNAL_MAGIC: &[u8; 4] = b"DNSG";

/// Raw signal file: `DNSG`, `u32` rows, `u32` columns, then row-major `f64`,
/// all little-endian.
pub fn write_signal_binary(x: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * x.len());
    buf.extend_from_slice(SIGNAL_MAGIC);
    for d in [x.nrows(), x.ncols()] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            buf.extend_from_slice(&x[(r, c)].to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_signal_binary(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != SIGNAL_MAGIC {
        return Err(format_err(path, "not a signal file (missing DNSG header)"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    let vals = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(DMatrix::from_row_iterator(rows, cols, vals))
}

/// A signal from `.csv` (regions as rows, no header) or the raw binary format.
pub fn read_signal(path: &Path) -> Result<SignalMatrix> {
    let values = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(path, false)?,
        _ => read_signal_binary(path)?,
    };
    let subject = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SignalMatrix::new(subject, values)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    format_err(path, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate, SimConfig};

    fn small(family: Family) -> DynamicNetworkDataset {
        let cfg = SimConfig {
            n: 6,
            subjects: 4,
            times: 5,
            basis_dim: 5,
            s0: 0.2,
            covariates: 2,
            family,
            seed: 11,
            ..SimConfig::default()
        };
        generate(&cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_identity() {
        for family in [Family::BernoulliLogit, Family::GaussianIdentity] {
            let data = small(family);
            let dir = tempfile::tempdir().unwrap();
            write_dataset(&data, dir.path()).unwrap();
            assert_eq!(read_dataset(dir.path()).unwrap(), data);
        }
    }

    #[test]
    fn binary_storage_size_matches_manifest() {
        let data = small(Family::BernoulliLogit);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.storage, Storage::U8);
        let total: u64 = (0..m.subjects)
            .map(|i| fs::metadata(dir.path().join(subject_file(i))).unwrap().len())
            .sum();
        assert_eq!(total as usize, m.subjects * m.times * m.n * m.n);
    }

    #[test]
    fn truncated_subject_names_expected_and_actual_bytes() {
        let data = small(Family::BernoulliLogit);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let path = dir.path().join(subject_file(2));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let msg = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("subject_2.bin"), "{msg}");
        assert!(msg.contains("expected 180 bytes") && msg.contains("found 173"), "{msg}");
    }

    #[test]
    fn covariate_shape_mismatch_is_reported() {
        let data = small(Family::BernoulliLogit);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let path = dir.path().join(COVARIATES);
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(3).collect();
        fs::write(&path, cut.join("\n")).unwrap();
        let msg = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("covariates.csv") && msg.contains("expected 4x2"), "{msg}");
    }

    #[test]
    fn signal_formats_round_trip() {
        let x = DMatrix::from_fn(3, 7, |r, c| (r * 7 + c) as f64 / 3.0 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("s1.bin");
        write_signal_binary(&x, &bin).unwrap();
        assert_eq!(read_signal(&bin).unwrap().values, x);
        let csv_path = dir.path().join("s1.csv");
        write_csv(&csv_path, None, &x).unwrap();
        let s = read_signal(&csv_path).unwrap();
        assert_eq!(s.values, x);
        assert_eq!(s.subject, "s1");
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1,2\n3,x\n").unwrap();
        assert!(read_csv(&path, false).unwrap_err().to_string().contains("not a number"));
        fs::write(&path, "1,2\n3\n").unwrap();
        assert!(read_csv(&path, false).is_err());
    }
}
