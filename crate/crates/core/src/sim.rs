//! Synthetic data generation: band-limited speckle fields, phantoms,
//! scanned acquisition stacks and sensor noise. Provides exact ground truth
//! (object, pattern, transfer, trajectory) for every end-to-end test.

use ndarray::Array2;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::ifft2;
use crate::forward::{forward_coherent, forward_fluor};
use crate::ops::{make_defocus_factor, make_incoherent_otf, make_pupil, ZernikeTerm};
use crate::types::{
    ComplexField, Grid2D, OpticalConfig, RealImage, ScanTrajectory, Shift2, SpecklePattern,
    TransferFunction,
};

/// Test-sample geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(deny_unknown_fields)]
pub enum PhantomSpec {
    /// Non-overlapping hard disks of fluorophore.
    Beads { diameter_um: f64, count: usize, density: f64, seed: u64 },
    /// Unit-amplitude field with vertical phase bars cycling through the
    /// given levels.
    PhaseTarget { bar_width_um: f64, levels_rad: Vec<f64> },
    /// Two single-pixel emitters separated along x.
    TwoPoints { separation_um: f64, amplitude: f64 },
}

/// A generated phantom in whichever channel it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum Phantom {
    Fluorescence(RealImage),
    Coherent(ComplexField),
}

/// Scan geometry and sensor model for one acquisition series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionPlan {
    pub rows: usize,
    pub cols: usize,
    /// Scan step, um.
    pub step_um: f64,
    /// Per-axis RMS of the random trajectory jitter, px.
    pub jitter_rms_px: f64,
    /// Expected photons at the mean-intensity pixel; `None` = noiseless.
    pub photon_budget: Option<f64>,
    /// Gaussian read noise sigma, counts.
    pub read_noise: f64,
}

impl AcquisitionPlan {
    pub fn n_img(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("scan grid must be non-empty".into()));
        }
        if !(self.step_um > 0.0) {
            return Err(Error::Config("scan step must be positive".into()));
        }
        if let Some(b) = self.photon_budget {
            if !(b > 0.0) {
                return Err(Error::Config("photon budget must be positive".into()));
            }
        }
        if self.jitter_rms_px < 0.0 || self.read_noise < 0.0 {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        Ok(())
    }

    /// Centered scan lattice (row-major order), in pixels of `grid`, without
    /// jitter.
    pub fn lattice(&self, grid: &Grid2D) -> Vec<Shift2> {
        let step_px = self.step_um / grid.pixel_size;
        let cy = (self.rows as f64 - 1.0) / 2.0;
        let cx = (self.cols as f64 - 1.0) / 2.0;
        let mut shifts = Vec::with_capacity(self.n_img());
        for r in 0..self.rows {
            for c in 0..self.cols {
                shifts.push(Shift2::new(
                    (c as f64 - cx) * step_px,
                    (r as f64 - cy) * step_px,
                ));
            }
        }
        shifts
    }
}

/// Band-limited fully developed speckle: circular-complex-Gaussian spectrum
/// supported on |u| <= NA_illum / lambda_ex, returned as the coherent field
/// `p_c` (scaled to unit mean intensity) and the linked intensity pattern
/// `p_f = |p_c|^2`.
pub fn gen_speckle(
    cfg: &OpticalConfig,
    grid: Grid2D,
    seed: u64,
) -> Result<(SpecklePattern, SpecklePattern)> {
    cfg.validate()?;
    let cutoff = cfg.na_illum / cfg.lambda_ex;
    if cutoff > grid.nyquist() {
        return Err(Error::Config(format!(
            "illumination cutoff {cutoff:.4} cyc/um exceeds grid Nyquist {:.4}",
            grid.nyquist()
        )));
    }
    let n = grid.side_px;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut spectrum: Array2<Complex64> = Array2::zeros((n, n));
    for ((qy, qx), v) in spectrum.indexed_iter_mut() {
        // draw for every bin so the spectral support does not change the
        // random stream alignment
        let re = gauss.sample(&mut rng);
        let im = gauss.sample(&mut rng);
        let fy = grid.freq(qy);
        let fx = grid.freq(qx);
        if fx.hypot(fy) <= cutoff + 1e-12 {
            *v = Complex64::new(re, im);
        }
    }
    let mut field = ifft2(&spectrum)?;
    let mean_intensity = field.iter().map(|v| v.norm_sqr()).sum::<f64>() / (n * n) as f64;
    if mean_intensity == 0.0 {
        return Err(Error::Config("speckle spectrum has no support on this grid".into()));
    }
    let scale = 1.0 / mean_intensity.sqrt();
    field.mapv_inplace(|v| v * scale);
    let intensity = field.mapv(|v| v.norm_sqr());
    Ok((
        SpecklePattern::complex(grid, field)?,
        SpecklePattern::real(grid, intensity)?,
    ))
}

/// Generate a phantom on the given grid.
pub fn gen_phantom(spec: &PhantomSpec, grid: Grid2D) -> Result<Phantom> {
    let n = grid.side_px;
    match spec {
        PhantomSpec::Beads { diameter_um, count, density, seed } => {
            let radius_px = 0.5 * diameter_um / grid.pixel_size;
            if 2.0 * radius_px < 1.0 {
                return Err(Error::Config(format!(
                    "bead diameter {diameter_um} um is below one pixel"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let margin = radius_px.ceil() + 1.0;
            let mut centers: Vec<(f64, f64)> = Vec::new();
            let mut attempts = 0usize;
            while centers.len() < *count {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "could not place the requested beads without overlap".into(),
                    ));
                }
                // integer centers keep every pixelized disk congruent, so
                // the total integral is exactly count x disk pixels x density
                let cy = rng.gen_range(margin..(n as f64 - margin)).round();
                let cx = rng.gen_range(margin..(n as f64 - margin)).round();
                let clear = centers
                    .iter()
                    .all(|&(y, x)| (y - cy).hypot(x - cx) > 2.0 * radius_px + 1.0);
                if clear {
                    centers.push((cy, cx));
                }
            }
            let mut values = Array2::zeros((n, n));
            for ((y, x), v) in values.indexed_iter_mut() {
                for &(cy, cx) in &centers {
                    if (y as f64 - cy).hypot(x as f64 - cx) <= radius_px {
                        *v = *density;
                        break;
                    }
                }
            }
            Ok(Phantom::Fluorescence(RealImage::new(grid, values)?))
        }
        PhantomSpec::PhaseTarget { bar_width_um, levels_rad } => {
            let width_px = (bar_width_um / grid.pixel_size).round() as usize;
            if width_px < 1 {
                return Err(Error::Config(format!(
                    "bar width {bar_width_um} um is below one pixel"
                )));
            }
            if levels_rad.is_empty() {
                return Err(Error::Config("phase target needs at least one level".into()));
            }
            let values = Array2::from_shape_fn((n, n), |(_, x)| {
                let level = levels_rad[(x / width_px) % levels_rad.len()];
                Complex64::from_polar(1.0, level)
            });
            Ok(Phantom::Coherent(ComplexField::new(grid, values)?))
        }
        PhantomSpec::TwoPoints { separation_um, amplitude } => {
            let sep_px = (separation_um / grid.pixel_size).round() as i64;
            if sep_px < 1 {
                return Err(Error::Config(format!(
                    "two-point separation {separation_um} um is below one pixel"
                )));
            }
            let c = n as i64 / 2;
            let x0 = c - sep_px / 2;
            let x1 = x0 + sep_px;
            if x0 < 0 || x1 >= n as i64 {
                return Err(Error::Config("two-point separation exceeds the grid".into()));
            }
            let mut values = Array2::zeros((n, n));
            values[(c as usize, x0 as usize)] = *amplitude;
            values[(c as usize, x1 as usize)] = *amplitude;
            Ok(Phantom::Fluorescence(RealImage::new(grid, values)?))
        }
    }
}

/// Whether successive frames see one translating pattern or independent
/// random ones (identical marginal statistics, no shared structure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeckleMode {
    Translating,
    IndependentPerFrame,
}

fn jittered_trajectory(
    plan: &AcquisitionPlan,
    grid: &Grid2D,
    rng: &mut ChaCha8Rng,
) -> ScanTrajectory {
    let jitter = Normal::new(0.0, plan.jitter_rms_px.max(0.0)).unwrap();
    let shifts = plan
        .lattice(grid)
        .into_iter()
        .map(|s| {
            if plan.jitter_rms_px > 0.0 {
                Shift2::new(s.x + jitter.sample(rng), s.y + jitter.sample(rng))
            } else {
                s
            }
        })
        .collect();
    ScanTrajectory::new(shifts)
}

/// Apply Poisson shot noise at the configured budget plus Gaussian read
/// noise, in place, clipping at zero. `gain` converts intensity units to
/// expected counts.
fn apply_noise(frame: &mut Array2<f64>, gain: f64, read_noise: f64, rng: &mut ChaCha8Rng) {
    let read = Normal::new(0.0, read_noise.max(0.0)).unwrap();
    for v in frame.iter_mut() {
        let lam = (*v * gain).max(0.0);
        let counts = if lam > 0.0 {
            Poisson::new(lam).expect("positive rate").sample(rng)
        } else {
            0.0
        };
        let noisy = counts + if read_noise > 0.0 { read.sample(rng) } else { 0.0 };
        *v = (noisy / gain).max(0.0);
    }
}

/// Everything one simulated fluorescence series exposes to a test harness.
#[derive(Debug, Clone)]
pub struct FluorSimulation {
    pub stack: Vec<RealImage>,
    pub trajectory: ScanTrajectory,
    pub otf: TransferFunction,
    /// Per-frame patterns; a single shared entry in translating mode.
    pub patterns: Vec<SpecklePattern>,
}

/// Simulate a fluorescence acquisition series from a phantom and speckle
/// pattern. In [`SpeckleMode::IndependentPerFrame`] each frame draws a fresh
/// speckle (seeded per frame) and the trajectory is identically zero.
pub fn simulate_fluor_stack(
    object: &RealImage,
    pattern: &SpecklePattern,
    plan: &AcquisitionPlan,
    optics: &OpticalConfig,
    mode: SpeckleMode,
    seed: u64,
) -> Result<FluorSimulation> {
    plan.validate()?;
    optics.validate()?;
    object.check_nonnegative()?;
    let otf = make_incoherent_otf(optics, object.grid)?;
    let pattern_grid = *pattern.grid();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectory = match mode {
        SpeckleMode::Translating => jittered_trajectory(plan, &pattern_grid, &mut rng),
        SpeckleMode::IndependentPerFrame => {
            ScanTrajectory::new(vec![Shift2::default(); plan.n_img()])
        }
    };
    trajectory.check_within(&pattern_grid, &object.grid)?;

    let mut patterns = Vec::new();
    let mut noiseless = Vec::with_capacity(plan.n_img());
    for l in 0..plan.n_img() {
        let frame_pattern: &SpecklePattern = match mode {
            SpeckleMode::Translating => {
                if patterns.is_empty() {
                    patterns.push(pattern.clone());
                }
                &patterns[0]
            }
            SpeckleMode::IndependentPerFrame => {
                // frame 0 reuses the supplied pattern so a single-frame series
                // is identical across modes; later frames draw fresh speckle
                if l == 0 {
                    patterns.push(pattern.clone());
                } else {
                    let (_, p_f) =
                        gen_speckle(optics, pattern_grid, seed.wrapping_add(l as u64))?;
                    patterns.push(p_f);
                }
                patterns.last().unwrap()
            }
        };
        noiseless.push(forward_fluor(object, frame_pattern, &otf, trajectory.shifts[l])?);
    }

    let stack = add_stack_noise(noiseless, plan, &mut rng)?;
    Ok(FluorSimulation { stack, trajectory, otf, patterns })
}

fn add_stack_noise(
    noiseless: Vec<RealImage>,
    plan: &AcquisitionPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RealImage>> {
    let Some(budget) = plan.photon_budget else {
        return Ok(noiseless);
    };
    let total: f64 = noiseless.iter().map(|f| f.values.sum()).sum();
    let count: usize = noiseless.iter().map(|f| f.values.len()).sum();
    let mean = total / count as f64;
    if !(mean > 0.0) {
        return Err(Error::Input("cannot set a photon budget on an all-zero stack".into()));
    }
    let gain = budget / mean;
    Ok(noiseless
        .into_iter()
        .map(|mut f| {
            apply_noise(&mut f.values, gain, plan.read_noise, rng);
            f
        })
        .collect())
}

/// Everything one simulated coherent series exposes to a test harness.
#[derive(Debug, Clone)]
pub struct CohSimulation {
    /// `stacks[z][l]`, one intensity stack per defocus plane.
    pub stacks: Vec<Vec<RealImage>>,
    /// One (identical) trajectory per plane.
    pub trajectories: Vec<ScanTrajectory>,
    pub pupil: TransferFunction,
    pub defocus: Vec<TransferFunction>,
}

/// Simulate defocused coherent intensity stacks, one per plane in
/// `optics.defocus_planes`, with an optional injected pupil aberration.
pub fn simulate_coherent_stacks(
    object: &ComplexField,
    pattern: &SpecklePattern,
    plan: &AcquisitionPlan,
    optics: &OpticalConfig,
    aberrations: &[ZernikeTerm],
    seed: u64,
) -> Result<CohSimulation> {
    plan.validate()?;
    optics.validate()?;
    if optics.defocus_planes.is_empty() {
        return Err(Error::Config("coherent simulation needs at least one plane".into()));
    }
    let pupil = make_pupil(optics, object.grid, aberrations)?;
    let defocus: Vec<TransferFunction> = optics
        .defocus_planes
        .iter()
        .map(|&z| make_defocus_factor(optics, z, object.grid))
        .collect::<Result<_>>()?;

    let pattern_grid = *pattern.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectory = jittered_trajectory(plan, &pattern_grid, &mut rng);
    trajectory.check_within(&pattern_grid, &object.grid)?;

    let mut stacks = Vec::with_capacity(defocus.len());
    for dz in &defocus {
        let mut noiseless = Vec::with_capacity(plan.n_img());
        for l in 0..plan.n_img() {
            let (_, intensity) =
                forward_coherent(object, pattern, &pupil, dz, trajectory.shifts[l])?;
            noiseless.push(intensity);
        }
        stacks.push(add_stack_noise(noiseless, plan, &mut rng)?);
    }
    let trajectories = vec![trajectory; defocus.len()];
    Ok(CohSimulation { stacks, trajectories, pupil, defocus })
}
