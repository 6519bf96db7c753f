//! Reusable finite-difference validation of every analytic gradient block.
//!
//! Builds seeded random instances and compares each gradient against central
//! finite differences of the matching cost. Real blocks are checked per
//! entry (`d cost = <g, dv>`); complex blocks per entry on both quadratures
//! (`d cost / d Re = 2 Re g`, `d cost / d Im = 2 Im g`). Errors are relative
//! to the largest gradient magnitude of the block, so flat directions do not
//! produce spurious failures.

use ndarray::Array2;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fft::{fft2_real, ifft2};
use crate::forward::{cost_coherent, cost_fluor};
use crate::grad::{grad_coherent, grad_fluor};
use crate::types::{
    ComplexField, Grid2D, RealImage, Shift2, SpecklePattern, TransferFunction, TransferKind,
};

/// Relative finite-difference error of one gradient block.
#[derive(Debug, Clone)]
pub struct BlockReport {
    /// `fluor_object`, `fluor_pattern`, `fluor_otf`, `fluor_position`,
    /// `coh_object`, `coh_pattern`, `coh_pupil` or `coh_position`.
    pub block: &'static str,
    pub max_rel_err: f64,
}

const STEP: f64 = 1e-6;
const N_PROBES: usize = 4;

fn random_real(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |_| rng.gen_range(0.1..1.0))
}

fn random_complex(n: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

/// Band-limited strictly positive pattern (no energy near Nyquist, so the
/// spectral shift model is exact).
fn band_limited_real(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = Grid2D::new(n, 1.0).unwrap();
    let mut spec = fft2_real(&random_real(n, rng)).unwrap();
    for ((qy, qx), v) in spec.indexed_iter_mut() {
        let fy = g.signed_freq_index(qy) as f64 / n as f64;
        let fx = g.signed_freq_index(qx) as f64 / n as f64;
        if fx.hypot(fy) > 0.3 {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    ifft2(&spec).unwrap().mapv(|v| v.re.max(0.0) + 0.05)
}

fn band_limited_complex(n: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
    let g = Grid2D::new(n, 1.0).unwrap();
    let mut spec = random_complex(n, rng);
    for ((qy, qx), v) in spec.indexed_iter_mut() {
        let fy = g.signed_freq_index(qy) as f64 / n as f64;
        let fx = g.signed_freq_index(qx) as f64 / n as f64;
        if fx.hypot(fy) > 0.3 {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    ifft2(&spec).unwrap()
}

fn random_otf(grid: Grid2D, rng: &mut ChaCha8Rng) -> TransferFunction {
    let spec = fft2_real(&random_real(grid.side_px, rng)).unwrap();
    let dc = spec[(0, 0)];
    TransferFunction::new(grid, TransferKind::IncoherentOtf, spec.mapv(|v| v / dc)).unwrap()
}

fn probe_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..N_PROBES).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect()
}

fn rel(analytic: f64, fd: f64, scale: f64) -> f64 {
    (analytic - fd).abs() / scale.max(1e-8)
}

/// Run the full eight-block finite-difference suite for one seed on
/// `m`-pixel camera / `n`-pixel pattern grids. Returns one report per block.
pub fn fd_suite(m: usize, n: usize, seed: u64) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gm = Grid2D::new(m, 1.0)?;
    let gn = Grid2D::new(n, 1.0)?;
    let mut reports = Vec::with_capacity(8);

    // ---- fluorescence channel ----
    let o_f = RealImage::new(gm, random_real(m, &mut rng))?;
    let p_f = SpecklePattern::real(gn, band_limited_real(n, &mut rng))?;
    let otf = random_otf(gm, &mut rng);
    let shift = Shift2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let obs_f = RealImage::new(gm, random_real(m, &mut rng))?;
    let g = grad_fluor(&o_f, &p_f, &otf, shift, &obs_f)?;
    let cost = |o: &RealImage, p: &SpecklePattern, t: &TransferFunction, s: Shift2| {
        cost_fluor(&obs_f, o, p, t, s).unwrap()
    };

    let scale = g.d_object.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (r, c) in probe_indices(m, &mut rng) {
        let mut plus = o_f.values.clone();
        plus[(r, c)] += STEP;
        let mut minus = o_f.values.clone();
        minus[(r, c)] -= STEP;
        let fd = (cost(&RealImage::new(gm, plus)?, &p_f, &otf, shift)
            - cost(&RealImage::new(gm, minus)?, &p_f, &otf, shift))
            / (2.0 * STEP);
        worst = worst.max(rel(g.d_object[(r, c)], fd, scale));
    }
    reports.push(BlockReport { block: "fluor_object", max_rel_err: worst });

    let SpecklePattern::RealIntensity { values: p_vals, .. } = p_f.clone() else {
        unreachable!("fluor pattern is real")
    };
    let scale = g.d_pattern.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (r, c) in probe_indices(n, &mut rng) {
        let mut plus = p_vals.clone();
        plus[(r, c)] += STEP;
        let mut minus = p_vals.clone();
        minus[(r, c)] -= STEP;
        let fd = (cost(&o_f, &SpecklePattern::real(gn, plus)?, &otf, shift)
            - cost(&o_f, &SpecklePattern::real(gn, minus)?, &otf, shift))
            / (2.0 * STEP);
        worst = worst.max(rel(g.d_pattern[(r, c)], fd, scale));
    }
    reports.push(BlockReport { block: "fluor_pattern", max_rel_err: worst });

    let scale = g.d_otf.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (r, c) in probe_indices(m, &mut rng) {
        for imag in [false, true] {
            let dv = if imag { Complex64::new(0.0, STEP) } else { Complex64::new(STEP, 0.0) };
            let mut plus = otf.values.clone();
            plus[(r, c)] += dv;
            let mut minus = otf.values.clone();
            minus[(r, c)] -= dv;
            let mk = |v: Array2<Complex64>| TransferFunction::new(gm, otf.kind, v).unwrap();
            let fd =
                (cost(&o_f, &p_f, &mk(plus), shift) - cost(&o_f, &p_f, &mk(minus), shift))
                    / (2.0 * STEP);
            let analytic =
                if imag { 2.0 * g.d_otf[(r, c)].im } else { 2.0 * g.d_otf[(r, c)].re };
            worst = worst.max(rel(analytic, fd, scale));
        }
    }
    reports.push(BlockReport { block: "fluor_otf", max_rel_err: worst });

    let scale = g.d_position.x.abs().max(g.d_position.y.abs());
    let mut worst = 0.0f64;
    for axis in 0..2 {
        let bump = |d: f64| {
            let mut s = shift;
            if axis == 0 {
                s.x += d;
            } else {
                s.y += d;
            }
            s
        };
        let fd = (cost(&o_f, &p_f, &otf, bump(STEP)) - cost(&o_f, &p_f, &otf, bump(-STEP)))
            / (2.0 * STEP);
        let analytic = if axis == 0 { g.d_position.x } else { g.d_position.y };
        worst = worst.max(rel(analytic, fd, scale));
    }
    reports.push(BlockReport { block: "fluor_position", max_rel_err: worst });

    // ---- coherent channel ----
    let o_c = ComplexField::new(gm, random_complex(m, &mut rng))?;
    let p_c = SpecklePattern::complex(gn, band_limited_complex(n, &mut rng))?;
    let pupil = TransferFunction::new(gm, TransferKind::CoherentPupil, random_complex(m, &mut rng))?;
    let defocus = TransferFunction::new(
        gm,
        TransferKind::DefocusFactor,
        Array2::from_shape_fn((m, m), |_| {
            Complex64::from_polar(1.0, rng.gen_range(-3.0..3.0))
        }),
    )?;
    let shift = Shift2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let obs_c = RealImage::new(gm, random_real(m, &mut rng))?;
    let g = grad_coherent(&o_c, &p_c, &pupil, &defocus, shift, &obs_c)?;
    let cost = |o: &ComplexField, p: &SpecklePattern, t: &TransferFunction, s: Shift2| {
        cost_coherent(&obs_c, o, p, t, &defocus, s).unwrap()
    };

    let scale = g.d_object.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (r, c) in probe_indices(m, &mut rng) {
        for imag in [false, true] {
            let dv = if imag { Complex64::new(0.0, STEP) } else { Complex64::new(STEP, 0.0) };
            let mut plus = o_c.values.clone();
            plus[(r, c)] += dv;
            let mut minus = o_c.values.clone();
            minus[(r, c)] -= dv;
            let fd = (cost(&ComplexField::new(gm, plus)?, &p_c, &pupil, shift)
                - cost(&ComplexField::new(gm, minus)?, &p_c, &pupil, shift))
                / (2.0 * STEP);
            let analytic =
                if imag { 2.0 * g.d_object[(r, c)].im } else { 2.0 * g.d_object[(r, c)].re };
            worst = worst.max(rel(analytic, fd, scale));
        }
    }
    reports.push(BlockReport { block: "coh_object", max_rel_err: worst });

    let SpecklePattern::ComplexField { values: p_vals, .. } = p_c.clone() else {
        unreachable!("coherent pattern is complex")
    };
    let scale = g.d_pattern.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (r, c) in probe_indices(n, &mut rng) {
        for imag in [false, true] {
            let dv = if imag { Complex64::new(0.0, STEP) } else { Complex64::new(STEP, 0.0) };
            let mut plus = p_vals.clone();
            plus[(r, c)] += dv;
            let mut minus = p_vals.clone();
            minus[(r, c)] -= dv;
            let fd = (cost(&o_c, &SpecklePattern::complex(gn, plus)?, &pupil, shift)
                - cost(&o_c, &SpecklePattern::complex(gn, minus)?, &pupil, shift))
                / (2.0 * STEP);
            let analytic =
                if imag { 2.0 * g.d_pattern[(r, c)].im } else { 2.0 * g.d_pattern[(r, c)].re };
            worst = worst.max(rel(analytic, fd, scale));
        }
    }
    reports.push(BlockReport { block: "coh_pattern", max_rel_err: worst });

    let scale = g.d_pupil.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (r, c) in probe_indices(m, &mut rng) {
        for imag in [false, true] {
            let dv = if imag { Complex64::new(0.0, STEP) } else { Complex64::new(STEP, 0.0) };
            let mut plus = pupil.values.clone();
            plus[(r, c)] += dv;
            let mut minus = pupil.values.clone();
            minus[(r, c)] -= dv;
            let mk = |v: Array2<Complex64>| TransferFunction::new(gm, pupil.kind, v).unwrap();
            let fd = (cost(&o_c, &p_c, &mk(plus), shift) - cost(&o_c, &p_c, &mk(minus), shift))
                / (2.0 * STEP);
            let analytic =
                if imag { 2.0 * g.d_pupil[(r, c)].im } else { 2.0 * g.d_pupil[(r, c)].re };
            worst = worst.max(rel(analytic, fd, scale));
        }
    }
    reports.push(BlockReport { block: "coh_pupil", max_rel_err: worst });

    let scale = g.d_position.x.abs().max(g.d_position.y.abs());
    let mut worst = 0.0f64;
    for axis in 0..2 {
        let bump = |d: f64| {
            let mut s = shift;
            if axis == 0 {
                s.x += d;
            } else {
                s.y += d;
            }
            s
        };
        let fd = (cost(&o_c, &p_c, &pupil, bump(STEP)) - cost(&o_c, &p_c, &pupil, bump(-STEP)))
            / (2.0 * STEP);
        let analytic = if axis == 0 { g.d_position.x } else { g.d_position.y };
        worst = worst.max(rel(analytic, fd, scale));
    }
    reports.push(BlockReport { block: "coh_position", max_rel_err: worst });

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for seed in 0..3 {
            let reports = fd_suite(8, 16, seed).unwrap();
            assert_eq!(reports.len(), 8);
            for r in &reports {
                assert!(r.max_rel_err < 1e-5, "{} rel err {}", r.block, r.max_rel_err);
            }
        }
    }
}
