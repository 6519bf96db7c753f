//! Analytic gradients of both data-fidelity costs with respect to object,
//! pattern, transfer function and scan position.
//!
//! Gradient conventions, chosen so central finite differences validate each
//! expression directly:
//! - for a real variable `v`, `d cost = <g, dv>`,
//! - for a complex variable `v`, `d cost = 2 Re <g, dv>` (conjugate /
//!   Wirtinger column gradient), so `d cost / d Re(v_i) = 2 Re(g_i)` and
//!   `d cost / d Im(v_i) = 2 Im(g_i)`.
//!
//! The position gradient differentiates the N-grid pattern spectrally
//! (`diag(-j 2 pi u_q) e(r)`); its tiny imaginary residue is recorded and
//! dropped.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::forward::pattern_as_complex;
use crate::ops::{crop, pad, ShiftAxis, ShiftKernel};
use crate::types::{ComplexField, Grid2D, RealImage, Shift2, SpecklePattern, TransferFunction};

/// Division guard for the amplitude-cost back-propagation at |g| ~ 0.
pub const AMPLITUDE_EPS: f64 = 1e-12;

/// Gradients of the fluorescence cost for a single acquisition.
#[derive(Debug, Clone)]
pub struct FluorGradients {
    pub d_object: Array2<f64>,
    pub d_pattern: Array2<f64>,
    pub d_otf: Array2<Complex64>,
    pub d_position: Shift2,
    /// Imaginary residue of the position gradient before it was dropped.
    pub position_imag_residue: Shift2,
    /// Cost of this acquisition at the evaluation point.
    pub cost: f64,
    /// Spectrum of the illuminated object, reused by the regularized
    /// transfer update.
    pub xi: Array2<Complex64>,
}

/// Gradients of the coherent (amplitude) cost for a single acquisition.
#[derive(Debug, Clone)]
pub struct CohGradients {
    pub d_object: Array2<Complex64>,
    pub d_pattern: Array2<Complex64>,
    pub d_pupil: Array2<Complex64>,
    pub d_position: Shift2,
    pub cost: f64,
    pub xi: Array2<Complex64>,
}

fn sum_real_product(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Shared spectral plumbing of one acquisition, computed once and reused by
/// every gradient: the shifted-pattern spectrum, the cropped illumination
/// and the spectrum of the illuminated object.
struct AcquisitionChain {
    kernel: ShiftKernel,
    /// `fft2(pattern) . e(r)` on the pattern grid.
    shifted_spec: Array2<Complex64>,
    /// Cropped illumination on the object grid.
    illum: Array2<Complex64>,
    /// `fft2(object . illum)`.
    xi: Array2<Complex64>,
}

impl AcquisitionChain {
    fn new(
        pattern_c: &Array2<Complex64>,
        pattern_grid: Grid2D,
        object: &Array2<Complex64>,
        shift: Shift2,
    ) -> Result<Self> {
        let m = object.nrows();
        let kernel = ShiftKernel::new(pattern_grid, shift);
        let mut shifted_spec = fft2(pattern_c)?;
        shifted_spec.zip_mut_with(&kernel.values, |s, k| *s *= k);
        let shifted = ifft2(&shifted_spec)?;
        let illum = crop(&shifted, m)?;
        let mut product = illum.clone();
        product.zip_mut_with(object, |v, o| *v *= o);
        let xi = fft2(&product)?;
        Ok(Self { kernel, shifted_spec, illum, xi })
    }

    /// `-2 <residual_spec, h . fft2(object . crop(d shifted/d q))> / M^2`
    /// for both axes: the position gradient, via Parseval.
    fn position_gradient(
        &self,
        grid: Grid2D,
        object: &Array2<Complex64>,
        transfer: &Array2<Complex64>,
        weight_spec: &Array2<Complex64>,
    ) -> Result<(Shift2, Shift2)> {
        let m = object.nrows();
        let m2 = (m * m) as f64;
        let mut grad = Shift2::default();
        let mut residue = Shift2::default();
        for axis in [ShiftAxis::X, ShiftAxis::Y] {
            let deriv = ShiftKernel::derivative_factor(grid, axis);
            let mut spec = self.shifted_spec.clone();
            spec.zip_mut_with(&deriv, |s, d| *s *= d);
            let dp = ifft2(&spec)?;
            let mut modulated = crop(&dp, m)?;
            modulated.zip_mut_with(object, |v, o| *v *= o);
            let mut mod_spec = fft2(&modulated)?;
            mod_spec.zip_mut_with(transfer, |s, t| *s *= t);
            let total = sum_real_product(weight_spec, &mod_spec) / m2;
            match axis {
                ShiftAxis::X => {
                    grad.x = -2.0 * total.re;
                    residue.x = -2.0 * total.im;
                }
                ShiftAxis::Y => {
                    grad.y = -2.0 * total.re;
                    residue.y = -2.0 * total.im;
                }
            }
        }
        Ok((grad, residue))
    }

    /// Adjoint of crop-then-shift applied to `a`: `shift_{-r}(pad(a))`,
    /// reusing the cached shift kernel.
    fn backproject_to_pattern(
        &self,
        a: &Array2<Complex64>,
        pattern_side: usize,
    ) -> Result<Array2<Complex64>> {
        let mut spec = fft2(&pad(a, pattern_side)?)?;
        spec.zip_mut_with(&self.kernel.values, |s, k| *s *= k.conj());
        ifft2(&spec)
    }
}

/// All four fluorescence gradients evaluated at one point.
pub fn grad_fluor(
    object: &RealImage,
    pattern: &SpecklePattern,
    otf: &TransferFunction,
    shift: Shift2,
    observed: &RealImage,
) -> Result<FluorGradients> {
    if observed.grid.side_px != object.grid.side_px {
        return Err(Error::Dimension("observation grid must match the object grid".into()));
    }
    let pattern_grid = *pattern.grid();
    let pattern_c = pattern_as_complex(pattern);
    let m = object.grid.side_px;
    let m2 = (m * m) as f64;
    let object_c = object.values.mapv(|v| Complex64::new(v, 0.0));

    let chain = AcquisitionChain::new(&pattern_c, pattern_grid, &object_c, shift)?;

    let mut y_spec = chain.xi.clone();
    y_spec.zip_mut_with(&otf.values, |s, h| *s *= h);
    let prediction = ifft2(&y_spec)?;
    let residual = {
        let mut r = prediction.mapv(|v| -v);
        r.zip_mut_with(&observed.values, |rv, &iv| *rv += iv);
        r
    };
    let cost: f64 = residual.iter().map(|v| v.norm_sqr()).sum();
    let residual_spec = fft2(&residual)?;

    // Back-propagated residual through the conjugated OTF.
    let mut w_spec = residual_spec.clone();
    w_spec.zip_mut_with(&otf.values, |s, h| *s *= h.conj());
    let w = ifft2(&w_spec)?;

    // d/d o = -2 Re{ c . conj(w) }
    let mut d_object = Array2::zeros((m, m));
    for (out, (c, wv)) in d_object.iter_mut().zip(chain.illum.iter().zip(w.iter())) {
        *out = -2.0 * (c * wv.conj()).re;
    }

    // d/d p = -2 Re{ shift_{-r}( pad( o . w ) ) }
    let mut ow = w;
    ow.zip_mut_with(&object.values, |v, &o| *v *= o);
    let back = chain.backproject_to_pattern(&ow, pattern_grid.side_px)?;
    let d_pattern = back.mapv(|v| -2.0 * v.re);

    // d/d otf = -(1 / M^2) conj(xi) . fft2(residual)
    let mut d_otf = chain.xi.mapv(|v| v.conj());
    d_otf.zip_mut_with(&residual_spec, |g, r| *g *= r * (-1.0 / m2));

    // d/d q = -2 Re{ sum conj(residual) . (h (x) [o . C{dp/dq}]) }
    let (d_position, residue) =
        chain.position_gradient(pattern_grid, &object_c, &otf.values, &residual_spec)?;

    Ok(FluorGradients {
        d_object,
        d_pattern,
        d_otf,
        d_position,
        position_imag_residue: residue,
        cost,
        xi: chain.xi,
    })
}

/// All four coherent gradients evaluated at one point. The shared
/// back-propagated residual is `w = (sqrt(I)/|g| - 1) . g` with the |g|
/// safeguard of [`AMPLITUDE_EPS`].
pub fn grad_coherent(
    object: &ComplexField,
    pattern: &SpecklePattern,
    pupil: &TransferFunction,
    defocus: &TransferFunction,
    shift: Shift2,
    observed: &RealImage,
) -> Result<CohGradients> {
    observed.check_nonnegative()?;
    if observed.grid.side_px != object.grid.side_px {
        return Err(Error::Dimension("observation grid must match the object grid".into()));
    }
    let pattern_grid = *pattern.grid();
    let pattern_c = pattern_as_complex(pattern);
    let m = object.grid.side_px;
    let m2 = (m * m) as f64;

    let chain = AcquisitionChain::new(&pattern_c, pattern_grid, &object.values, shift)?;

    // combined transfer pupil . defocus
    let mut transfer = pupil.values.clone();
    transfer.zip_mut_with(&defocus.values, |t, d| *t *= d);
    let mut g_spec = chain.xi.clone();
    g_spec.zip_mut_with(&transfer, |s, t| *s *= t);
    let g = ifft2(&g_spec)?;

    let mut cost = 0.0;
    let mut w = Array2::zeros((m, m));
    for (wv, (&i_obs, gv)) in w.iter_mut().zip(observed.values.iter().zip(g.iter())) {
        let amp = gv.norm();
        let target = i_obs.sqrt();
        let d = target - amp;
        cost += d * d;
        *wv = (target / amp.max(AMPLITUDE_EPS) - 1.0) * gv;
    }
    let w_spec = fft2(&w)?;

    // back-propagation through the conjugated transfer
    let mut wb_spec = w_spec.clone();
    wb_spec.zip_mut_with(&transfer, |s, t| *s *= t.conj());
    let wb = ifft2(&wb_spec)?;

    // d/d o = -conj(c) . wb
    let mut d_object = chain.illum.mapv(|v| v.conj());
    d_object.zip_mut_with(&wb, |v, b| *v = -(*v * b));

    // d/d p = -shift_{-r}( pad( conj(o) . wb ) )
    let mut ob = object.values.mapv(|v| v.conj());
    ob.zip_mut_with(&wb, |v, b| *v *= b);
    let back = chain.backproject_to_pattern(&ob, pattern_grid.side_px)?;
    let d_pattern = back.mapv(|v| -v);

    // d/d pupil = -(1 / M^2) conj(defocus) . conj(xi) . fft2(w)
    let mut d_pupil = chain.xi.mapv(|v| v.conj());
    d_pupil.zip_mut_with(&w_spec, |p, s| *p *= s);
    d_pupil.zip_mut_with(&defocus.values, |p, d| *p *= d.conj() * (1.0 / m2));
    d_pupil.mapv_inplace(|v| -v);

    // d/d q = -2 Re{ sum conj(w) . (h_{c,z} (x) [o . C{dp/dq}]) }
    let (d_position, _) =
        chain.position_gradient(pattern_grid, &object.values, &transfer, &w_spec)?;

    Ok(CohGradients { d_object, d_pattern, d_pupil, d_position, cost, xi: chain.xi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{fft2_real, ifft2};
    use crate::types::{Grid2D, TransferKind};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, 1.0).unwrap()
    }

    fn random_real(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |_| rng.gen_range(0.1..1.0))
    }

    fn random_complex(n: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
        Array2::from_shape_fn((n, n), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    /// Band-limited nonnegative pattern (no Nyquist energy).
    fn band_limited_pattern(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let g = grid(n);
        let raw = random_real(n, rng);
        let mut spec = fft2_real(&raw).unwrap();
        for ((qy, qx), v) in spec.indexed_iter_mut() {
            let fy = g.signed_freq_index(qy) as f64 / n as f64;
            let fx = g.signed_freq_index(qx) as f64 / n as f64;
            if fx.hypot(fy) > 0.3 {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let field = ifft2(&spec).unwrap();
        field.mapv(|v| v.re.max(0.0) + 0.05)
    }

    fn random_otf(g: Grid2D, rng: &mut ChaCha8Rng) -> TransferFunction {
        let psf = random_real(g.side_px, rng);
        let spec = fft2_real(&psf).unwrap();
        let dc = spec[(0, 0)];
        TransferFunction::new(g, TransferKind::IncoherentOtf, spec.mapv(|v| v / dc)).unwrap()
    }

    struct FluorInstance {
        o: RealImage,
        p: SpecklePattern,
        otf: TransferFunction,
        shift: Shift2,
        observed: RealImage,
    }

    fn fluor_instance(seed: u64) -> FluorInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gm = grid(8);
        let gn = grid(16);
        let o = RealImage::new(gm, random_real(8, &mut rng)).unwrap();
        let p = SpecklePattern::real(gn, band_limited_pattern(16, &mut rng)).unwrap();
        let otf = random_otf(gm, &mut rng);
        let shift = Shift2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        // observed differs from the model so gradients are non-trivial
        let observed = RealImage::new(gm, random_real(8, &mut rng)).unwrap();
        FluorInstance { o, p, otf, shift, observed }
    }

    fn fluor_cost(inst: &FluorInstance) -> f64 {
        crate::forward::cost_fluor(&inst.observed, &inst.o, &inst.p, &inst.otf, inst.shift)
            .unwrap()
    }

    #[test]
    fn zero_gradients_at_global_minimum() {
        let mut inst = fluor_instance(1);
        inst.observed =
            crate::forward::forward_fluor(&inst.o, &inst.p, &inst.otf, inst.shift).unwrap();
        let g = grad_fluor(&inst.o, &inst.p, &inst.otf, inst.shift, &inst.observed).unwrap();
        assert!(g.cost < 1e-20);
        assert!(g.d_object.iter().all(|v| v.abs() < 1e-12));
        assert!(g.d_pattern.iter().all(|v| v.abs() < 1e-12));
        assert!(g.d_otf.iter().all(|v| v.norm() < 1e-12));
        assert!(g.d_position.x.abs() < 1e-10 && g.d_position.y.abs() < 1e-10);
    }

    #[test]
    fn delta_psf_uniform_pattern_reduces_to_residual() {
        let gm = grid(8);
        let gn = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = RealImage::new(gm, random_real(8, &mut rng)).unwrap();
        let p = SpecklePattern::real(gn, Array2::ones((16, 16))).unwrap();
        let otf = TransferFunction::new(
            gm,
            TransferKind::IncoherentOtf,
            Array2::from_elem((8, 8), Complex64::new(1.0, 0.0)),
        )
        .unwrap();
        let observed = RealImage::new(gm, random_real(8, &mut rng)).unwrap();
        let g = grad_fluor(&o, &p, &otf, Shift2::default(), &observed).unwrap();
        for ((idx, gv), (&iv, &ov)) in g
            .d_object
            .indexed_iter()
            .zip(observed.values.iter().zip(o.values.iter()))
        {
            let _ = idx;
            assert!((gv - (-2.0 * (iv - ov))).abs() < 1e-12);
        }
    }

    fn max_rel_err(analytic: f64, fd: f64, scale: f64) -> f64 {
        (analytic - fd).abs() / scale.max(1e-8)
    }

    #[test]
    fn fluor_gradients_match_finite_differences() {
        let inst = fluor_instance(3);
        let g =
            grad_fluor(&inst.o, &inst.p, &inst.otf, inst.shift, &inst.observed).unwrap();
        let h = 1e-6;
        let scale = g
            .d_object
            .iter()
            .map(|v| v.abs())
            .chain(g.d_pattern.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);

        // a handful of probe entries per variable keeps the test quick
        let probes = [(0usize, 0usize), (3, 5), (7, 2), (4, 4)];
        for &(r, c) in &probes {
            let mut plus = inst.o.values.clone();
            plus[(r, c)] += h;
            let mut minus = inst.o.values.clone();
            minus[(r, c)] -= h;
            let fd = (fluor_cost(&FluorInstance {
                o: RealImage::new(inst.o.grid, plus).unwrap(),
                ..clone_inst(&inst)
            }) - fluor_cost(&FluorInstance {
                o: RealImage::new(inst.o.grid, minus).unwrap(),
                ..clone_inst(&inst)
            })) / (2.0 * h);
            assert!(
                max_rel_err(g.d_object[(r, c)], fd, scale) < 1e-5,
                "object ({r},{c}): {} vs {fd}",
                g.d_object[(r, c)]
            );
        }

        for &(r, c) in &probes {
            let pv = match &inst.p {
                SpecklePattern::RealIntensity { values, .. } => values.clone(),
                _ => unreachable!(),
            };
            let mut plus = pv.clone();
            plus[(r + 2, c + 3)] += h;
            let mut minus = pv.clone();
            minus[(r + 2, c + 3)] -= h;
            let gn = *inst.p.grid();
            let fd = (fluor_cost(&FluorInstance {
                p: SpecklePattern::RealIntensity { grid: gn, values: plus },
                ..clone_inst(&inst)
            }) - fluor_cost(&FluorInstance {
                p: SpecklePattern::RealIntensity { grid: gn, values: minus },
                ..clone_inst(&inst)
            })) / (2.0 * h);
            assert!(
                max_rel_err(g.d_pattern[(r + 2, c + 3)], fd, scale) < 1e-5,
                "pattern: {} vs {fd}",
                g.d_pattern[(r + 2, c + 3)]
            );
        }

        let otf_scale = g.d_otf.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for &(r, c) in &probes {
            for imag in [false, true] {
                let dv = if imag {
                    Complex64::new(0.0, h)
                } else {
                    Complex64::new(h, 0.0)
                };
                let mut plus = inst.otf.values.clone();
                plus[(r, c)] += dv;
                let mut minus = inst.otf.values.clone();
                minus[(r, c)] -= dv;
                let mk = |vals: Array2<Complex64>| FluorInstance {
                    otf: TransferFunction::new(inst.otf.grid, inst.otf.kind, vals).unwrap(),
                    ..clone_inst(&inst)
                };
                let fd = (fluor_cost(&mk(plus)) - fluor_cost(&mk(minus))) / (2.0 * h);
                let analytic = if imag {
                    2.0 * g.d_otf[(r, c)].im
                } else {
                    2.0 * g.d_otf[(r, c)].re
                };
                assert!(
                    max_rel_err(analytic, fd, otf_scale) < 1e-5,
                    "otf ({r},{c}) imag={imag}: {analytic} vs {fd}"
                );
            }
        }

        // position
        let pos_scale = g.d_position.x.abs().max(g.d_position.y.abs());
        for axis in 0..2 {
            let bump = |d: f64| {
                let mut s = inst.shift;
                if axis == 0 {
                    s.x += d;
                } else {
                    s.y += d;
                }
                FluorInstance { shift: s, ..clone_inst(&inst) }
            };
            let fd = (fluor_cost(&bump(h)) - fluor_cost(&bump(-h))) / (2.0 * h);
            let analytic = if axis == 0 { g.d_position.x } else { g.d_position.y };
            assert!(
                max_rel_err(analytic, fd, pos_scale) < 1e-5,
                "position axis {axis}: {analytic} vs {fd}"
            );
        }

        // the dropped imaginary part must stay small relative to the magnitude
        assert!(g.position_imag_residue.norm() < 1e-6 * g.d_position.norm().max(1e-6));
    }

    fn clone_inst(inst: &FluorInstance) -> FluorInstance {
        FluorInstance {
            o: inst.o.clone(),
            p: inst.p.clone(),
            otf: inst.otf.clone(),
            shift: inst.shift,
            observed: inst.observed.clone(),
        }
    }

    struct CohInstance {
        o: ComplexField,
        p: SpecklePattern,
        pupil: TransferFunction,
        defocus: TransferFunction,
        shift: Shift2,
        observed: RealImage,
    }

    fn coh_instance(seed: u64) -> CohInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gm = grid(8);
        let gn = grid(16);
        let o = ComplexField::new(gm, random_complex(8, &mut rng)).unwrap();
        let p = SpecklePattern::complex(gn, random_complex(16, &mut rng)).unwrap();
        let pupil = TransferFunction::new(gm, TransferKind::CoherentPupil, {
            random_complex(8, &mut rng)
        })
        .unwrap();
        let defocus = TransferFunction::new(gm, TransferKind::DefocusFactor, {
            Array2::from_shape_fn((8, 8), |_| {
                Complex64::from_polar(1.0, rng.gen_range(-3.0..3.0))
            })
        })
        .unwrap();
        let shift = Shift2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let observed = RealImage::new(gm, random_real(8, &mut rng)).unwrap();
        CohInstance { o, p, pupil, defocus, shift, observed }
    }

    fn coh_cost(inst: &CohInstance) -> f64 {
        crate::forward::cost_coherent(
            &inst.observed,
            &inst.o,
            &inst.p,
            &inst.pupil,
            &inst.defocus,
            inst.shift,
        )
        .unwrap()
    }

    fn clone_coh(inst: &CohInstance) -> CohInstance {
        CohInstance {
            o: inst.o.clone(),
            p: inst.p.clone(),
            pupil: inst.pupil.clone(),
            defocus: inst.defocus.clone(),
            shift: inst.shift,
            observed: inst.observed.clone(),
        }
    }

    #[test]
    fn coherent_zero_gradients_at_global_minimum() {
        let mut inst = coh_instance(4);
        let (_, intensity) = crate::forward::forward_coherent(
            &inst.o,
            &inst.p,
            &inst.pupil,
            &inst.defocus,
            inst.shift,
        )
        .unwrap();
        inst.observed = intensity;
        let g = grad_coherent(
            &inst.o,
            &inst.p,
            &inst.pupil,
            &inst.defocus,
            inst.shift,
            &inst.observed,
        )
        .unwrap();
        assert!(g.cost < 1e-18);
        assert!(g.d_object.iter().all(|v| v.norm() < 1e-10));
        assert!(g.d_pattern.iter().all(|v| v.norm() < 1e-10));
        assert!(g.d_pupil.iter().all(|v| v.norm() < 1e-10));
        assert!(g.d_position.norm() < 1e-9);
    }

    #[test]
    fn coherent_gradients_match_finite_differences() {
        let inst = coh_instance(5);
        let g = grad_coherent(
            &inst.o,
            &inst.p,
            &inst.pupil,
            &inst.defocus,
            inst.shift,
            &inst.observed,
        )
        .unwrap();
        let h = 1e-6;
        let probes = [(0usize, 0usize), (3, 5), (7, 2), (4, 4)];

        let o_scale = g.d_object.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for &(r, c) in &probes {
            for imag in [false, true] {
                let dv = if imag { Complex64::new(0.0, h) } else { Complex64::new(h, 0.0) };
                let mut plus = inst.o.values.clone();
                plus[(r, c)] += dv;
                let mut minus = inst.o.values.clone();
                minus[(r, c)] -= dv;
                let mk = |vals: Array2<Complex64>| CohInstance {
                    o: ComplexField::new(inst.o.grid, vals).unwrap(),
                    ..clone_coh(&inst)
                };
                let fd = (coh_cost(&mk(plus)) - coh_cost(&mk(minus))) / (2.0 * h);
                let analytic =
                    if imag { 2.0 * g.d_object[(r, c)].im } else { 2.0 * g.d_object[(r, c)].re };
                assert!(
                    max_rel_err(analytic, fd, o_scale) < 1e-5,
                    "object ({r},{c}) imag={imag}: {analytic} vs {fd}"
                );
            }
        }

        let p_scale = g.d_pattern.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for &(r, c) in &probes {
            for imag in [false, true] {
                let dv = if imag { Complex64::new(0.0, h) } else { Complex64::new(h, 0.0) };
                let pv = match &inst.p {
                    SpecklePattern::ComplexField { values, .. } => values.clone(),
                    _ => unreachable!(),
                };
                let mut plus = pv.clone();
                plus[(r + 4, c + 1)] += dv;
                let mut minus = pv;
                minus[(r + 4, c + 1)] -= dv;
                let gn = *inst.p.grid();
                let mk = |vals: Array2<Complex64>| CohInstance {
                    p: SpecklePattern::ComplexField { grid: gn, values: vals },
                    ..clone_coh(&inst)
                };
                let fd = (coh_cost(&mk(plus)) - coh_cost(&mk(minus))) / (2.0 * h);
                let analytic = if imag {
                    2.0 * g.d_pattern[(r + 4, c + 1)].im
                } else {
                    2.0 * g.d_pattern[(r + 4, c + 1)].re
                };
                assert!(
                    max_rel_err(analytic, fd, p_scale) < 1e-5,
                    "pattern imag={imag}: {analytic} vs {fd}"
                );
            }
        }

        let h_scale = g.d_pupil.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for &(r, c) in &probes {
            for imag in [false, true] {
                let dv = if imag { Complex64::new(0.0, h) } else { Complex64::new(h, 0.0) };
                let mut plus = inst.pupil.values.clone();
                plus[(r, c)] += dv;
                let mut minus = inst.pupil.values.clone();
                minus[(r, c)] -= dv;
                let mk = |vals: Array2<Complex64>| CohInstance {
                    pupil: TransferFunction::new(inst.pupil.grid, inst.pupil.kind, vals)
                        .unwrap(),
                    ..clone_coh(&inst)
                };
                let fd = (coh_cost(&mk(plus)) - coh_cost(&mk(minus))) / (2.0 * h);
                let analytic =
                    if imag { 2.0 * g.d_pupil[(r, c)].im } else { 2.0 * g.d_pupil[(r, c)].re };
                assert!(
                    max_rel_err(analytic, fd, h_scale) < 1e-5,
                    "pupil imag={imag}: {analytic} vs {fd}"
                );
            }
        }

        let pos_scale = g.d_position.x.abs().max(g.d_position.y.abs());
        for axis in 0..2 {
            let bump = |d: f64| {
                let mut s = inst.shift;
                if axis == 0 {
                    s.x += d;
                } else {
                    s.y += d;
                }
                CohInstance { shift: s, ..clone_coh(&inst) }
            };
            let fd = (coh_cost(&bump(h)) - coh_cost(&bump(-h))) / (2.0 * h);
            let analytic = if axis == 0 { g.d_position.x } else { g.d_position.y };
            assert!(
                max_rel_err(analytic, fd, pos_scale) < 1e-5,
                "position axis {axis}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn descent_step_decreases_each_cost() {
        let inst = fluor_instance(6);
        let g =
            grad_fluor(&inst.o, &inst.p, &inst.otf, inst.shift, &inst.observed).unwrap();
        let base = fluor_cost(&inst);
        let step = 1e-4 / g.d_object.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let stepped = RealImage::new(
            inst.o.grid,
            &inst.o.values - &g.d_object.mapv(|v| v * step),
        )
        .unwrap();
        let after = fluor_cost(&FluorInstance { o: stepped, ..clone_inst(&inst) });
        assert!(after < base, "cost {base} -> {after}");
    }

    #[test]
    fn amplitude_safeguard_never_nan() {
        let mut inst = coh_instance(7);
        // zero out the object so |g| = 0 everywhere
        inst.o = ComplexField::new(inst.o.grid, Array2::zeros((8, 8))).unwrap();
        let g = grad_coherent(
            &inst.o,
            &inst.p,
            &inst.pupil,
            &inst.defocus,
            inst.shift,
            &inst.observed,
        )
        .unwrap();
        assert!(g.d_object.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        assert!(g.d_pattern.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        assert!(g.cost.is_finite());
    }

    #[test]
    fn coherent_phase_gauge_covariance() {
        // rotating o by phi and p by -phi leaves the cost unchanged and
        // rotates d_object covariantly
        let inst = coh_instance(8);
        let phi = 0.6;
        let rot = Complex64::from_polar(1.0, phi);
        let rotated = CohInstance {
            o: ComplexField::new(inst.o.grid, inst.o.values.mapv(|v| v * rot)).unwrap(),
            p: match &inst.p {
                SpecklePattern::ComplexField { grid, values } => SpecklePattern::ComplexField {
                    grid: *grid,
                    values: values.mapv(|v| v / rot),
                },
                _ => unreachable!(),
            },
            ..clone_coh(&inst)
        };
        let c0 = coh_cost(&inst);
        let c1 = coh_cost(&rotated);
        assert!((c0 - c1).abs() < 1e-9 * c0.max(1.0));

        let g0 = grad_coherent(&inst.o, &inst.p, &inst.pupil, &inst.defocus, inst.shift, &inst.observed).unwrap();
        let g1 = grad_coherent(&rotated.o, &rotated.p, &rotated.pupil, &rotated.defocus, rotated.shift, &rotated.observed).unwrap();
        let err = g0
            .d_object
            .iter()
            .zip(g1.d_object.iter())
            .map(|(a, b)| (a * rot - b).norm())
            .fold(0.0, f64::max);
        let scale = g0.d_object.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-9 * scale.max(1.0), "covariance err {err}");
    }
}
