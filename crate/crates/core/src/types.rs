//! Domain types shared by every module: grids, images, speckle patterns,
//! transfer functions, scan trajectories and configuration.
//!
//! Conventions used everywhere:
//! - arrays are row-major with index `(row = y, col = x)`,
//! - shifts are `(x, y)` in pixels of the grid they act on,
//! - frequency-domain arrays keep DC at index 0, with the signed integer
//!   frequency of bin `q` equal to `q` for `q <= n/2` and `q - n` above
//!   (Nyquist lands on `+n/2`),
//! - all reconstruction math is f64; file I/O narrows to f32.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square pixel raster: side length in pixels and the physical pixel pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    /// Pixels per side; even and >= 2 so FFT halves split cleanly.
    pub side_px: usize,
    /// Pixel pitch in micrometers.
    pub pixel_size: f64,
}

impl Grid2D {
    pub fn new(side_px: usize, pixel_size: f64) -> Result<Self> {
        if side_px < 2 || side_px % 2 != 0 {
            return Err(Error::Dimension(format!(
                "grid side must be even and >= 2, got {side_px}"
            )));
        }
        if !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(Error::Config(format!(
                "pixel size must be positive and finite, got {pixel_size}"
            )));
        }
        Ok(Self { side_px, pixel_size })
    }

    /// Signed integer frequency of FFT bin `q` (DC at 0, Nyquist at +n/2).
    pub fn signed_freq_index(&self, q: usize) -> i64 {
        let n = self.side_px;
        if q <= n / 2 {
            q as i64
        } else {
            q as i64 - n as i64
        }
    }

    /// Spatial frequency of bin `q` in cycles per micrometer.
    pub fn freq(&self, q: usize) -> f64 {
        self.signed_freq_index(q) as f64 / (self.side_px as f64 * self.pixel_size)
    }

    /// Physical side length in micrometers.
    pub fn extent(&self) -> f64 {
        self.side_px as f64 * self.pixel_size
    }

    /// Largest representable frequency magnitude along one axis (cycles/um).
    pub fn nyquist(&self) -> f64 {
        0.5 / self.pixel_size
    }
}

fn check_shape(grid: &Grid2D, rows: usize, cols: usize) -> Result<()> {
    if rows != grid.side_px || cols != grid.side_px {
        return Err(Error::Dimension(format!(
            "array is {rows}x{cols}, grid expects {0}x{0}",
            grid.side_px
        )));
    }
    Ok(())
}

/// Real-valued raster (intensity image or fluorophore density) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub grid: Grid2D,
    pub values: Array2<f64>,
}

impl RealImage {
    pub fn new(grid: Grid2D, values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        check_shape(&grid, r, c)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("real image contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        let n = grid.side_px;
        Self { grid, values: Array2::zeros((n, n)) }
    }

    /// Intensity images must be elementwise nonnegative.
    pub fn check_nonnegative(&self) -> Result<()> {
        if self.values.iter().any(|&v| v < 0.0) {
            return Err(Error::Input("intensity image has negative entries".into()));
        }
        Ok(())
    }
}

/// Complex-valued raster (transmittance, field at the image plane).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: Grid2D,
    pub values: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(grid: Grid2D, values: Array2<Complex64>) -> Result<Self> {
        let (r, c) = values.dim();
        check_shape(&grid, r, c)?;
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Input("complex field contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }
}

/// Illumination pattern on the larger N-grid. The fluorescence channel sees
/// a real nonnegative intensity pattern, the coherent channel a complex field.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecklePattern {
    RealIntensity { grid: Grid2D, values: Array2<f64> },
    ComplexField { grid: Grid2D, values: Array2<Complex64> },
}

impl SpecklePattern {
    pub fn real(grid: Grid2D, values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        check_shape(&grid, r, c)?;
        if values.iter().any(|&v| !v.is_finite()) {
            return Err(Error::Input("pattern contains non-finite values".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::Input("intensity pattern has negative entries".into()));
        }
        Ok(Self::RealIntensity { grid, values })
    }

    pub fn complex(grid: Grid2D, values: Array2<Complex64>) -> Result<Self> {
        let (r, c) = values.dim();
        check_shape(&grid, r, c)?;
        Ok(Self::ComplexField { grid, values })
    }

    pub fn grid(&self) -> &Grid2D {
        match self {
            Self::RealIntensity { grid, .. } => grid,
            Self::ComplexField { grid, .. } => grid,
        }
    }

    /// Pattern grids must strictly contain the paired object grid.
    pub fn check_pairs_with(&self, object_grid: &Grid2D) -> Result<()> {
        if self.grid().side_px <= object_grid.side_px {
            return Err(Error::Dimension(format!(
                "pattern grid ({}) must be larger than object grid ({})",
                self.grid().side_px,
                object_grid.side_px
            )));
        }
        Ok(())
    }
}

/// Which frequency-domain response a [`TransferFunction`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferKind {
    IncoherentOtf,
    CoherentPupil,
    DefocusFactor,
}

/// Frequency-domain system response sampled on the FFT layout of its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    pub grid: Grid2D,
    pub kind: TransferKind,
    pub values: Array2<Complex64>,
}

impl TransferFunction {
    pub fn new(grid: Grid2D, kind: TransferKind, values: Array2<Complex64>) -> Result<Self> {
        let (r, c) = values.dim();
        check_shape(&grid, r, c)?;
        Ok(Self { grid, kind, values })
    }
}

/// Continuous 2D shift in pixels, `(x, y)` = (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Shift2 {
    pub x: f64,
    pub y: f64,
}

impl Shift2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl std::ops::Add for Shift2 {
    type Output = Shift2;
    fn add(self, rhs: Shift2) -> Shift2 {
        Shift2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Shift2 {
    type Output = Shift2;
    fn sub(self, rhs: Shift2) -> Shift2 {
        Shift2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Per-acquisition pattern shifts on the pattern grid, one entry per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTrajectory {
    pub shifts: Vec<Shift2>,
}

impl ScanTrajectory {
    pub fn new(shifts: Vec<Shift2>) -> Self {
        Self { shifts }
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    /// Every shifted pattern crop must stay inside the pattern support:
    /// max |shift| + M/2 < N/2.
    pub fn check_within(&self, pattern_grid: &Grid2D, object_grid: &Grid2D) -> Result<()> {
        let half_m = object_grid.side_px as f64 / 2.0;
        let half_n = pattern_grid.side_px as f64 / 2.0;
        for (l, s) in self.shifts.iter().enumerate() {
            let max_component = s.x.abs().max(s.y.abs());
            if max_component + half_m >= half_n {
                return Err(Error::Config(format!(
                    "shift {l} ({:.3}, {:.3}) pushes the crop window outside the pattern",
                    s.x, s.y
                )));
            }
        }
        Ok(())
    }

    /// Root-mean-square distance to another trajectory of the same length.
    pub fn rms_distance(&self, other: &ScanTrajectory) -> f64 {
        assert_eq!(self.len(), other.len());
        let sum: f64 = self
            .shifts
            .iter()
            .zip(&other.shifts)
            .map(|(a, b)| (*a - *b).norm().powi(2))
            .sum();
        (sum / self.len() as f64).sqrt()
    }
}

/// Wavelengths, numerical apertures and defocus geometry of the instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalConfig {
    /// Excitation / laser wavelength, um.
    pub lambda_ex: f64,
    /// Fluorescence emission wavelength, um.
    pub lambda_em: f64,
    /// Detection-side numerical aperture.
    pub na_sys: f64,
    /// Illumination numerical aperture set by the scattering element.
    pub na_illum: f64,
    /// Defocus plane positions for the coherent channel, um.
    pub defocus_planes: Vec<f64>,
    /// Immersion medium refractive index.
    pub medium_index: f64,
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ex > 0.0) || !(self.lambda_em > 0.0) {
            return Err(Error::Config("wavelengths must be positive".into()));
        }
        if !(self.na_sys > 0.0) || self.na_sys > self.medium_index {
            return Err(Error::Config(format!(
                "need 0 < na_sys <= medium_index, got na_sys={} n={}",
                self.na_sys, self.medium_index
            )));
        }
        if !(self.na_illum > 0.0) {
            return Err(Error::Config("na_illum must be positive".into()));
        }
        Ok(())
    }

    /// Resolution gain bound (NA_sys + NA_illum) / NA_sys.
    pub fn resolution_gain(&self) -> f64 {
        (self.na_sys + self.na_illum) / self.na_sys
    }

    /// Native incoherent resolution lambda_em / (2 NA_sys), um.
    pub fn incoherent_resolution(&self) -> f64 {
        self.lambda_em / (2.0 * self.na_sys)
    }

    /// Native coherent resolution lambda_ex / NA_sys, um.
    pub fn coherent_resolution(&self) -> f64 {
        self.lambda_ex / self.na_sys
    }
}

/// Which variables the solver updates; disabling entries ablates
/// the corresponding self-calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateMask {
    pub object: bool,
    pub pattern: bool,
    pub transfer: bool,
    pub trajectory: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        Self { object: true, pattern: true, transfer: true, trajectory: true }
    }
}

/// Solver parameters for both reconstruction algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Outer iteration count (K_f or K_c).
    pub max_iters: usize,
    /// Position-update step for the fluorescence channel, px per unit gradient.
    pub pos_step_fluor: f64,
    /// Position-update step for the coherent channel, px per unit gradient.
    pub pos_step_coh: f64,
    /// Transfer-update regularizer delta, relative to max |xi|^2.
    pub otf_reg: f64,
    /// Step constant in the regularized OTF update (12 in the fluorescence
    /// algorithm, 5 in the coherent one); `None` keeps the per-channel value.
    pub transfer_step_const: Option<f64>,
    /// Nesterov momentum on object and pattern (fluorescence only).
    pub use_acceleration: bool,
    /// Multiplier on the normalized object step (1.0 = algorithm default).
    pub object_step_scale: f64,
    /// Multiplier on the normalized pattern step (1.0 = algorithm default).
    pub pattern_step_scale: f64,
    pub update_mask: UpdateMask,
    /// Clip fluorescence object and pattern at zero after each update.
    pub clip_nonnegative: bool,
    /// Hold the trajectory fixed for this many outer iterations before
    /// enabling position refinement.
    pub trajectory_warmup_iters: usize,
    /// Optional early stop on relative cost change per iteration.
    pub cost_tol: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            pos_step_fluor: 1e-3,
            pos_step_coh: 1e-3,
            otf_reg: 1e-3,
            transfer_step_const: None,
            use_acceleration: true,
            object_step_scale: 1.0,
            pattern_step_scale: 1.0,
            update_mask: UpdateMask::default(),
            clip_nonnegative: true,
            trajectory_warmup_iters: 0,
            cost_tol: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.otf_reg > 0.0) {
            return Err(Error::Config("otf_reg must be positive".into()));
        }
        if self.pos_step_fluor < 0.0 || self.pos_step_coh < 0.0 {
            return Err(Error::Config("position steps must be >= 0".into()));
        }
        if !(self.object_step_scale > 0.0) || !(self.pattern_step_scale > 0.0) {
            return Err(Error::Config("step scales must be positive".into()));
        }
        Ok(())
    }
}

/// Reconstructed object: real fluorophore density or complex transmittance.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectEstimate {
    Fluorescence(RealImage),
    Coherent(ComplexField),
}

/// Everything a reconstruction run produces.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub object: ObjectEstimate,
    pub pattern: SpecklePattern,
    pub transfer: TransferFunction,
    /// One refined trajectory per defocus plane (single entry for fluorescence).
    pub trajectories: Vec<ScanTrajectory>,
    /// Total cost after each outer iteration.
    pub cost_history: Vec<f64>,
    pub trace: Vec<crate::solver::IterationTrace>,
}
