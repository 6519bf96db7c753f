//! On-disk acquisition format: a directory with `manifest.json` plus one raw
//! frame file per acquisition, `frame_{z:02}_{l:05}.raw`, row-major 32-bit
//! little-endian floats (complex data interleaved re,im). Sidecars written
//! by the simulator (`trajectory.csv`, ground truth rasters) live in the
//! same directory.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use speckle_sim::sim::AcquisitionPlan;
use speckle_sim::types::{Grid2D, OpticalConfig, RealImage, ScanTrajectory, Shift2};

use crate::error::{AppError, AppResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub format_version: u32,
    /// `fluorescence` or `coherent`.
    pub channel: String,
    pub grid_px: usize,
    pub pixel_size_um: f64,
    pub optics: OpticalConfig,
    pub plan: AcquisitionPlan,
    pub n_planes: usize,
    pub n_frames: usize,
    pub endianness: String,
}

pub fn frame_name(z: usize, l: usize) -> String {
    format!("frame_{z:02}_{l:05}.raw")
}

pub fn write_real_raw(path: &Path, values: &Array2<f64>) -> AppResult<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_real_raw(path: &Path, side: usize) -> AppResult<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != side * side * 4 {
        return Err(AppError::Io(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            side * side * 4,
            bytes.len()
        )));
    }
    let mut values = Array2::zeros((side, side));
    for (v, chunk) in values.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
    }
    Ok(values)
}

pub fn write_complex_raw(path: &Path, values: &Array2<Complex64>) -> AppResult<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values.iter() {
        bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_complex_raw(path: &Path, side: usize) -> AppResult<Array2<Complex64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != side * side * 8 {
        return Err(AppError::Io(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            side * side * 8,
            bytes.len()
        )));
    }
    let mut values = Array2::zeros((side, side));
    for (v, chunk) in values.iter_mut().zip(bytes.chunks_exact(8)) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().expect("4 bytes")) as f64;
        let im = f32::from_le_bytes(chunk[4..8].try_into().expect("4 bytes")) as f64;
        *v = Complex64::new(re, im);
    }
    Ok(values)
}

/// Write a full acquisition series: `planes[z][l]` intensity frames.
pub fn write_stack(
    dir: &Path,
    manifest: &StackManifest,
    planes: &[Vec<RealImage>],
) -> AppResult<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    for (z, stack) in planes.iter().enumerate() {
        for (l, frame) in stack.iter().enumerate() {
            write_real_raw(&dir.join(frame_name(z, l)), &frame.values)?;
        }
    }
    Ok(())
}

/// Read a full acquisition series back; shapes are validated against the
/// manifest.
pub fn read_stack(dir: &Path) -> AppResult<(StackManifest, Vec<Vec<RealImage>>)> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    let manifest: StackManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(AppError::Config(format!(
            "unsupported stack format version {}",
            manifest.format_version
        )));
    }
    if manifest.endianness != "little" {
        return Err(AppError::Config("only little-endian stacks are supported".into()));
    }
    let grid = Grid2D::new(manifest.grid_px, manifest.pixel_size_um)?;
    let mut planes = Vec::with_capacity(manifest.n_planes);
    for z in 0..manifest.n_planes {
        let mut stack = Vec::with_capacity(manifest.n_frames);
        for l in 0..manifest.n_frames {
            let values = read_real_raw(&dir.join(frame_name(z, l)), manifest.grid_px)?;
            stack.push(RealImage::new(grid, values)?);
        }
        planes.push(stack);
    }
    Ok((manifest, planes))
}

/// Trajectory table: `frame,x_px,y_px` with a header row.
pub fn write_trajectory_csv(path: &Path, traj: &ScanTrajectory) -> AppResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "x_px", "y_px"])?;
    for (l, s) in traj.shifts.iter().enumerate() {
        w.write_record([l.to_string(), format!("{:.17e}", s.x), format!("{:.17e}", s.y)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> AppResult<ScanTrajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let mut shifts = Vec::new();
    for record in r.records() {
        let record = record?;
        let x: f64 = record
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AppError::Io(format!("{}: bad x field", path.display())))?;
        let y: f64 = record
            .get(2)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AppError::Io(format!("{}: bad y field", path.display())))?;
        shifts.push(Shift2::new(x, y));
    }
    Ok(ScanTrajectory::new(shifts))
}
