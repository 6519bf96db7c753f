//! Report artifacts: grayscale and log-spectrum PNGs, CSV tables and the
//! per-run manifest (config hash + tool version + artifact list).

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;
use num_complex::Complex64;
use serde::Serialize;
use sha2::{Digest, Sha256};
use speckle_sim::fft::fft2_real;
use speckle_sim::types::ScanTrajectory;

use crate::error::AppResult;

/// Min-max normalized 8-bit grayscale PNG.
pub fn save_png(path: &Path, values: &Array2<f64>) -> AppResult<()> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = values.dim();
    let mut img = GrayImage::new(cols as u32, rows as u32);
    for ((r, c), &v) in values.indexed_iter() {
        let g = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
        img.put_pixel(c as u32, r as u32, Luma([g]));
    }
    img.save(path)?;
    Ok(())
}

/// Centered (DC in the middle) log-magnitude spectrum of a real image.
pub fn save_spectrum_png(path: &Path, values: &Array2<f64>) -> AppResult<()> {
    let spec = fft2_real(values)?;
    let n = spec.nrows();
    let shifted = Array2::from_shape_fn((n, n), |(r, c)| {
        let v: Complex64 = spec[((r + n / 2) % n, (c + n / 2) % n)];
        (1.0 + v.norm()).log10()
    });
    save_png(path, &shifted)
}

pub fn write_cost_csv(path: &Path, history: &[f64]) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "cost"])?;
    for (k, c) in history.iter().enumerate() {
        w.write_record([k.to_string(), format!("{c:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Before/after trajectory table for self-calibration reports.
pub fn write_trajectory_pair_csv(
    path: &Path,
    before: &ScanTrajectory,
    after: &ScanTrajectory,
) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "x_init_px", "y_init_px", "x_refined_px", "y_refined_px"])?;
    for (l, (b, a)) in before.shifts.iter().zip(&after.shifts).enumerate() {
        w.write_record([
            l.to_string(),
            format!("{:.17e}", b.x),
            format!("{:.17e}", b.y),
            format!("{:.17e}", a.x),
            format!("{:.17e}", a.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    mode: &'a str,
    seed: u64,
    config_sha256: String,
    artifacts: &'a [String],
}

pub fn config_sha256(config_bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    format!("{:x}", hasher.finalize())
}

/// Write `<out>/manifest.json` describing this run.
pub fn write_run_manifest(
    out: &Path,
    mode: &str,
    config_bytes: &[u8],
    seed: u64,
    artifacts: &[String],
) -> AppResult<()> {
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        mode,
        seed,
        config_sha256: config_sha256(config_bytes),
        artifacts,
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}
