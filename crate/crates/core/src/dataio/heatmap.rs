use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Values below this are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-8;

fn log_values(diff: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    if diff.len() != height * width || diff.is_empty() {
        return Err(Error::shape("heatmap", &[diff.len()], &[height, width]));
    }
    if let Some(v) = diff.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("heatmap: value {v} is negative or non-finite")));
    }
    Ok(diff.iter().map(|v| v.max(LOG_FLOOR).log10()).collect())
}

/// Row-major CSV of `log10(max(v, 1e-8))` with six decimals.
pub fn heatmap_csv(diff: &[f64], height: usize, width: usize) -> Result<String> {
    let logs = log_values(diff, height, width)?;
    let mut out = String::new();
    for row in logs.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("string write");
    }
    Ok(out)
}

/// ASCII PGM with logs mapped linearly from `[-8, log10(max)]` to `[0, 255]`.
pub fn heatmap_pgm(diff: &[f64], height: usize, width: usize) -> Result<String> {
    let logs = log_values(diff, height, width)?;
    let lo = LOG_FLOOR.log10();
    let hi = logs.iter().copied().fold(lo, f64::max);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in logs.chunks(width) {
        let cells: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if hi > lo { (v - lo) / (hi - lo) * 255.0 } else { 0.0 };
                (g.round().clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        writeln!(out, "{}", cells.join(" ")).expect("string write");
    }
    Ok(out)
}

/// Writes `<stem>.csv` and `<stem>.pgm`, returning both paths.
pub fn write_heatmap(diff: &[f64], height: usize, width: usize, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = heatmap_csv(diff, height, width)?;
    let pgm = heatmap_pgm(diff, height, width)?;
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;
    Ok((csv_path, pgm_path))
}
