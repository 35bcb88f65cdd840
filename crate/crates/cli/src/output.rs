use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dnetreg::simulation::format_f64;
use dnetreg::{FitOptions, FitResult};
use nalgebra::DMatrix;
use serde::Serialize;

pub fn out_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Headerless CSV with fixed 17-significant-digit formatting.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut text = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format_f64(*v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

/// `fit.json`, `options.json`, the baseline and slope tensors and the factor
/// matrices.
pub fn write_fit(dir: &Path, fit: &FitResult, opts: &FitOptions) -> Result<()> {
    let mut text = fit.to_json(false)?;
    text.push('\n');
    write_text(&dir.join("fit.json"), &text)?;
    write_json(&dir.join("options.json"), opts)?;
    fit.baseline_tensor().write_binary(&dir.join("baseline.bin"))?;
    fit.params.slopes.write_binary(&dir.join("slopes.bin"))?;
    write_matrix_csv(&dir.join("u1.csv"), &fit.params.baseline.u1)?;
    write_matrix_csv(&dir.join("u3.csv"), &fit.params.baseline.u3)?;
    log::info!("fit took {:.3} s", fit.wall_time_secs);
    Ok(())
}
