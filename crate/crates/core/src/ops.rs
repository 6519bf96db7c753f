//! Shared numerical operators: centered crop/pad adjoint pair, Fourier
//! sub-pixel shifts and their spectral derivatives, transfer-function
//! synthesis (OTF, pupil, defocus), Zernike phases and sub-pixel
//! registration by upsampled cross-correlation.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2, fft2_real, ifft2};
use crate::types::{ComplexField, Grid2D, OpticalConfig, RealImage, Shift2, SpecklePattern, TransferFunction, TransferKind};

/// Fourier phase ramp `e(r)[u] = exp(-j 2 pi u . r)` implementing a
/// translation by `r` pixels on its grid. Unit magnitude everywhere.
#[derive(Debug, Clone)]
pub struct ShiftKernel {
    pub grid: Grid2D,
    pub values: Array2<Complex64>,
}

impl ShiftKernel {
    pub fn new(grid: Grid2D, shift: Shift2) -> Self {
        let n = grid.side_px;
        let values = Array2::from_shape_fn((n, n), |(qy, qx)| {
            let fy = grid.signed_freq_index(qy) as f64 / n as f64;
            let fx = grid.signed_freq_index(qx) as f64 / n as f64;
            let phase = -2.0 * std::f64::consts::PI * (fx * shift.x + fy * shift.y);
            Complex64::from_polar(1.0, phase)
        });
        Self { grid, values }
    }

    /// Spectral derivative factor `-j 2 pi u_q` along one axis,
    /// in radians per pixel of shift.
    pub fn derivative_factor(grid: Grid2D, axis: ShiftAxis) -> Array2<Complex64> {
        let n = grid.side_px;
        Array2::from_shape_fn((n, n), |(qy, qx)| {
            let q = match axis {
                ShiftAxis::X => qx,
                ShiftAxis::Y => qy,
            };
            let f = grid.signed_freq_index(q) as f64 / n as f64;
            Complex64::new(0.0, -2.0 * std::f64::consts::PI * f)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftAxis {
    X,
    Y,
}

// ---------------------------------------------------------------------------
// Centered crop / zero-pad adjoint pair
// ---------------------------------------------------------------------------

fn crop_offset(n: usize, m: usize) -> Result<usize> {
    if m > n {
        return Err(Error::Dimension(format!("cannot crop {n} down to {m}")));
    }
    Ok((n - m) / 2)
}

/// Centered m x m window of a larger array.
pub fn crop<T: Copy + Default>(a: &Array2<T>, m: usize) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("crop input must be square".into()));
    }
    let off = crop_offset(n, m)?;
    Ok(Array2::from_shape_fn((m, m), |(r, c)| a[(r + off, c + off)]))
}

/// Zero-pad an m x m array into the centered window of an n x n array.
/// Exact adjoint of [`crop`].
pub fn pad<T: Copy + Default>(a: &Array2<T>, n: usize) -> Result<Array2<T>> {
    let m = a.nrows();
    if a.ncols() != m {
        return Err(Error::Dimension("pad input must be square".into()));
    }
    let off = crop_offset(n, m)?;
    let mut out = Array2::from_elem((n, n), T::default());
    for ((r, c), &v) in a.indexed_iter() {
        out[(r + off, c + off)] = v;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sub-pixel shifts
// ---------------------------------------------------------------------------

/// Circular translation by `shift` pixels via a Fourier phase ramp.
/// Integer shifts reduce to exact sample permutations.
pub fn subpixel_shift_complex(
    a: &Array2<Complex64>,
    grid: Grid2D,
    shift: Shift2,
) -> Result<Array2<Complex64>> {
    let kernel = ShiftKernel::new(grid, shift);
    let mut spec = fft2(a)?;
    spec.zip_mut_with(&kernel.values, |s, k| *s *= k);
    ifft2(&spec)
}

/// Shift of a real array. Exact (zero imaginary residue) whenever the input
/// carries no Nyquist-row energy, which holds for all band-limited patterns.
pub fn subpixel_shift_real(a: &Array2<f64>, grid: Grid2D, shift: Shift2) -> Result<Array2<f64>> {
    let complex = a.mapv(|v| Complex64::new(v, 0.0));
    let shifted = subpixel_shift_complex(&complex, grid, shift)?;
    Ok(shifted.mapv(|v| v.re))
}

/// Typed shift of a speckle pattern on its own grid.
pub fn subpixel_shift(pattern: &SpecklePattern, shift: Shift2) -> Result<SpecklePattern> {
    match pattern {
        SpecklePattern::RealIntensity { grid, values } => {
            // Fourier interpolation may ring slightly negative; keep it,
            // the forward model tolerates small excursions.
            let shifted = subpixel_shift_real(values, *grid, shift)?;
            Ok(SpecklePattern::RealIntensity { grid: *grid, values: shifted })
        }
        SpecklePattern::ComplexField { grid, values } => {
            let shifted = subpixel_shift_complex(values, *grid, shift)?;
            Ok(SpecklePattern::ComplexField { grid: *grid, values: shifted })
        }
    }
}

/// Derivative of the shifted array with respect to one shift component,
/// computed spectrally as `ifft2(-j 2 pi u_q . e(r) . fft2(a))`.
pub fn shift_derivative(
    a: &Array2<Complex64>,
    grid: Grid2D,
    shift: Shift2,
    axis: ShiftAxis,
) -> Result<Array2<Complex64>> {
    let kernel = ShiftKernel::new(grid, shift);
    let deriv = ShiftKernel::derivative_factor(grid, axis);
    let mut spec = fft2(a)?;
    spec.zip_mut_with(&kernel.values, |s, k| *s *= k);
    spec.zip_mut_with(&deriv, |s, d| *s *= d);
    ifft2(&spec)
}

// ---------------------------------------------------------------------------
// Transfer-function synthesis
// ---------------------------------------------------------------------------

fn radial_freq(grid: Grid2D, qy: usize, qx: usize) -> f64 {
    grid.freq(qx).hypot(grid.freq(qy))
}

fn binary_circ(grid: Grid2D, radius: f64) -> Array2<Complex64> {
    let n = grid.side_px;
    Array2::from_shape_fn((n, n), |(qy, qx)| {
        if radial_freq(grid, qy, qx) <= radius + 1e-12 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Unaberrated incoherent OTF: the normalized autocorrelation of the
/// emission-wavelength pupil. Unity at DC, zero beyond 2 NA / lambda_em.
pub fn make_incoherent_otf(cfg: &OpticalConfig, grid: Grid2D) -> Result<TransferFunction> {
    cfg.validate()?;
    let cutoff = 2.0 * cfg.na_sys / cfg.lambda_em;
    if cutoff > grid.nyquist() {
        return Err(Error::Config(format!(
            "incoherent cutoff {cutoff:.4} cyc/um exceeds grid Nyquist {:.4}",
            grid.nyquist()
        )));
    }
    let pupil = binary_circ(grid, cfg.na_sys / cfg.lambda_em);
    let amplitude_psf = ifft2(&pupil)?;
    let intensity_psf = amplitude_psf.mapv(|v| Complex64::new(v.norm_sqr(), 0.0));
    let mut otf = fft2(&intensity_psf)?;
    let dc = otf[(0, 0)];
    if dc.norm() == 0.0 {
        return Err(Error::Config("pupil contains no passband samples".into()));
    }
    otf.mapv_inplace(|v| v / dc);
    // The discrete autocorrelation support is exactly |u| <= cutoff;
    // clear FFT rounding noise outside it.
    for ((qy, qx), v) in otf.indexed_iter_mut() {
        if radial_freq(grid, qy, qx) > cutoff + 1e-12 {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    TransferFunction::new(grid, TransferKind::IncoherentOtf, otf)
}

/// Zernike polynomial Z_n^m on the unit disk (cosine branch for m >= 0,
/// sine branch for m < 0), unnormalized.
pub fn zernike(n: u32, m: i32, rho: f64, theta: f64) -> f64 {
    let m_abs = m.unsigned_abs();
    assert!(m_abs <= n && (n - m_abs) % 2 == 0, "invalid Zernike indices ({n},{m})");
    let fact = |k: u32| -> f64 { (1..=k).map(|i| i as f64).product::<f64>().max(1.0) };
    let mut radial = 0.0;
    for k in 0..=((n - m_abs) / 2) {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let num = fact(n - k);
        let den = fact(k) * fact((n + m_abs) / 2 - k) * fact((n - m_abs) / 2 - k);
        radial += sign * num / den * rho.powi((n - 2 * k) as i32);
    }
    if m >= 0 {
        radial * (m_abs as f64 * theta).cos()
    } else {
        radial * (m_abs as f64 * theta).sin()
    }
}

/// A Zernike phase term: indices (n, m) and a coefficient in radians.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZernikeTerm {
    pub n: u32,
    pub m: i32,
    pub coeff_rad: f64,
}

/// Coherent pupil: unity inside NA_sys / lambda_ex, zero outside, with an
/// optional Zernike phase over the pupil disk.
pub fn make_pupil(
    cfg: &OpticalConfig,
    grid: Grid2D,
    aberrations: &[ZernikeTerm],
) -> Result<TransferFunction> {
    cfg.validate()?;
    let cutoff = cfg.na_sys / cfg.lambda_ex;
    if cutoff > grid.nyquist() {
        return Err(Error::Config(format!(
            "coherent cutoff {cutoff:.4} cyc/um exceeds grid Nyquist {:.4}",
            grid.nyquist()
        )));
    }
    let n = grid.side_px;
    let values = Array2::from_shape_fn((n, n), |(qy, qx)| {
        let ux = grid.freq(qx);
        let uy = grid.freq(qy);
        let r = ux.hypot(uy);
        if r > cutoff + 1e-12 {
            return Complex64::new(0.0, 0.0);
        }
        let rho = (r / cutoff).min(1.0);
        let theta = uy.atan2(ux);
        let phase: f64 = aberrations
            .iter()
            .map(|t| t.coeff_rad * zernike(t.n, t.m, rho, theta))
            .sum();
        Complex64::from_polar(1.0, phase)
    });
    TransferFunction::new(grid, TransferKind::CoherentPupil, values)
}

/// Angular-spectrum defocus factor
/// `exp(j 2 pi z sqrt((n_m/lambda_ex)^2 - |u|^2))` inside the propagating
/// band, zero outside. `z = 0` is the identity inside the band.
pub fn make_defocus_factor(cfg: &OpticalConfig, z: f64, grid: Grid2D) -> Result<TransferFunction> {
    cfg.validate()?;
    if !z.is_finite() {
        return Err(Error::Config("defocus distance must be finite".into()));
    }
    let k = cfg.medium_index / cfg.lambda_ex;
    let n = grid.side_px;
    let values = Array2::from_shape_fn((n, n), |(qy, qx)| {
        let u2 = radial_freq(grid, qy, qx).powi(2);
        let arg = k * k - u2;
        if arg <= 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * z * arg.sqrt())
        }
    });
    TransferFunction::new(grid, TransferKind::DefocusFactor, values)
}

// ---------------------------------------------------------------------------
// Sub-pixel registration
// ---------------------------------------------------------------------------

/// Registration upsampling factor: local correlation is sampled on a
/// 1/UPSAMPLE px lattice around the integer peak.
pub const REGISTRATION_UPSAMPLE: usize = 100;

/// Recover the translation `s` with `moving = shift(ref, s)`, by FFT
/// cross-correlation followed by locally upsampled evaluation of the
/// correlation surface (0.01 px granularity).
pub fn register_subpixel(reference: &RealImage, moving: &RealImage) -> Result<Shift2> {
    if reference.grid != moving.grid {
        return Err(Error::Dimension("registration inputs must share a grid".into()));
    }
    let energy_ref: f64 = reference.values.iter().map(|v| v * v).sum();
    let energy_mov: f64 = moving.values.iter().map(|v| v * v).sum();
    if energy_ref == 0.0 || energy_mov == 0.0 {
        return Err(Error::Input("registration input is identically zero".into()));
    }
    let n = reference.grid.side_px;
    let f_ref = fft2_real(&reference.values)?;
    let f_mov = fft2_real(&moving.values)?;
    // Cross-power spectrum whose inverse transform peaks at the shift.
    let mut xpow = f_mov;
    xpow.zip_mut_with(&f_ref, |m, r| *m *= r.conj());

    let corr = ifft2(&xpow)?;
    let mut best = (0usize, 0usize);
    let mut best_val = f64::NEG_INFINITY;
    for ((r, c), v) in corr.indexed_iter() {
        if v.re > best_val {
            best_val = v.re;
            best = (r, c);
        }
    }
    let to_signed = |q: usize| -> f64 {
        if q <= n / 2 {
            q as f64
        } else {
            q as f64 - n as f64
        }
    };
    let coarse = Shift2::new(to_signed(best.1), to_signed(best.0));

    // Evaluate corr(d) = (1/n^2) sum_u X(u) exp(j 2 pi u . d) on a fine
    // lattice within +-1 px of the coarse peak (separable matrix DFT).
    let step = 1.0 / REGISTRATION_UPSAMPLE as f64;
    let half = REGISTRATION_UPSAMPLE as i64; // +-1 px window
    let k = (2 * half + 1) as usize;
    let offsets: Vec<f64> = (-half..=half).map(|i| i as f64 * step).collect();

    let basis = |center: f64| -> Array2<Complex64> {
        Array2::from_shape_fn((k, n), |(a, q)| {
            let f = reference.grid.signed_freq_index(q) as f64 / n as f64;
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f * (center + offsets[a]))
        })
    };
    let ey = basis(coarse.y);
    let ex = basis(coarse.x);
    // local[a, b] = sum_{qy,qx} ey[a,qy] X[qy,qx] ex[b,qx]
    let partial = ey.dot(&xpow); // k x n
    let local = partial.dot(&ex.t()); // k x k

    let mut fine = coarse;
    let mut fine_val = f64::NEG_INFINITY;
    for ((a, b), v) in local.indexed_iter() {
        if v.re > fine_val {
            fine_val = v.re;
            fine = Shift2::new(coarse.x + offsets[b], coarse.y + offsets[a]);
        }
    }
    Ok(fine)
}

/// Typed crop of an N-grid field view down to the object grid.
pub fn crop_field(field: &ComplexField, target: Grid2D) -> Result<ComplexField> {
    let values = crop(&field.values, target.side_px)?;
    ComplexField::new(target, values)
}

/// Typed zero-pad of an object-grid field up to the pattern grid.
pub fn pad_field(field: &ComplexField, target: Grid2D) -> Result<ComplexField> {
    let values = pad(&field.values, target.side_px)?;
    ComplexField::new(target, values)
}
