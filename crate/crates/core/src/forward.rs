//! Forward models and data-fidelity costs for both imaging channels.
//!
//! Fluorescence: `I = [o . C{p(r - r_l)}] (x) h`, evaluated as
//! `ifft2(otf . fft2(o . crop(shift(p))))`.
//! Coherent: `g = ifft2(pupil . defocus . fft2(o . crop(shift(p))))`,
//! `I = |g|^2`, with an amplitude-based cost `sum (sqrt(I) - |g|)^2`.
//!
//! Pattern shifts are applied in the Fourier domain on the N-grid before
//! cropping, so the analytic gradients are exact adjoints of this chain.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::ops::{crop, subpixel_shift_complex};
use crate::types::{ComplexField, Grid2D, RealImage, Shift2, SpecklePattern, TransferFunction};

/// Circular convolution with a frequency-domain transfer function.
pub(crate) fn conv_transfer(
    x: &Array2<Complex64>,
    h: &Array2<Complex64>,
) -> Result<Array2<Complex64>> {
    let mut spec = fft2(x)?;
    spec.zip_mut_with(h, |s, t| *s *= t);
    ifft2(&spec)
}

/// Illumination seen by the object: the shifted pattern cropped to the
/// centered M x M window, kept complex through the chain.
pub(crate) fn illumination(
    pattern: &Array2<Complex64>,
    pattern_grid: Grid2D,
    object_side: usize,
    shift: Shift2,
) -> Result<Array2<Complex64>> {
    let shifted = subpixel_shift_complex(pattern, pattern_grid, shift)?;
    crop(&shifted, object_side)
}

pub(crate) fn pattern_as_complex(p: &SpecklePattern) -> Array2<Complex64> {
    match p {
        SpecklePattern::RealIntensity { values, .. } => {
            values.mapv(|v| Complex64::new(v, 0.0))
        }
        SpecklePattern::ComplexField { values, .. } => values.clone(),
    }
}

fn check_fluor_inputs(
    object: &RealImage,
    pattern: &SpecklePattern,
    otf: &TransferFunction,
) -> Result<()> {
    pattern.check_pairs_with(&object.grid)?;
    if otf.grid.side_px != object.grid.side_px {
        return Err(Error::Dimension("OTF grid must match the object grid".into()));
    }
    if matches!(pattern, SpecklePattern::ComplexField { .. }) {
        return Err(Error::Input("fluorescence channel needs a real intensity pattern".into()));
    }
    Ok(())
}

/// Complex-valued fluorescence prediction, plus the cropped illumination.
/// The prediction is real up to FFT rounding whenever the pattern carries
/// no Nyquist energy; callers that need a [`RealImage`] assert the residue.
pub(crate) fn fluor_prediction(
    object: &Array2<f64>,
    pattern_c: &Array2<Complex64>,
    pattern_grid: Grid2D,
    otf: &Array2<Complex64>,
    shift: Shift2,
) -> Result<(Array2<Complex64>, Array2<Complex64>)> {
    let m = object.nrows();
    let illum = illumination(pattern_c, pattern_grid, m, shift)?;
    let mut product = illum.clone();
    product.zip_mut_with(object, |c, &o| *c *= o);
    let prediction = conv_transfer(&product, otf)?;
    Ok((illum, prediction))
}

/// Fluorescence forward model: speckle-modulated object imaged through the
/// incoherent OTF.
pub fn forward_fluor(
    object: &RealImage,
    pattern: &SpecklePattern,
    otf: &TransferFunction,
    shift: Shift2,
) -> Result<RealImage> {
    check_fluor_inputs(object, pattern, otf)?;
    let pattern_c = pattern_as_complex(pattern);
    let (_, prediction) =
        fluor_prediction(&object.values, &pattern_c, *pattern.grid(), &otf.values, shift)?;
    let scale = prediction.iter().map(|v| v.re.abs()).fold(0.0, f64::max).max(1e-300);
    let residue = prediction.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if residue > 1e-10 * scale {
        return Err(Error::Numerical(format!(
            "fluorescence prediction has imaginary residue {residue:.3e} (scale {scale:.3e})"
        )));
    }
    RealImage::new(object.grid, prediction.mapv(|v| v.re))
}

/// Sum of squared intensity residuals for one acquisition.
pub fn cost_fluor(
    observed: &RealImage,
    object: &RealImage,
    pattern: &SpecklePattern,
    otf: &TransferFunction,
    shift: Shift2,
) -> Result<f64> {
    check_fluor_inputs(object, pattern, otf)?;
    if observed.grid.side_px != object.grid.side_px {
        return Err(Error::Dimension("observation grid must match the object grid".into()));
    }
    let pattern_c = pattern_as_complex(pattern);
    let (_, prediction) =
        fluor_prediction(&object.values, &pattern_c, *pattern.grid(), &otf.values, shift)?;
    Ok(observed
        .values
        .iter()
        .zip(prediction.iter())
        .map(|(&i, y)| (Complex64::new(i, 0.0) - y).norm_sqr())
        .sum())
}

fn check_coherent_inputs(
    object: &ComplexField,
    pattern: &SpecklePattern,
    pupil: &TransferFunction,
    defocus: &TransferFunction,
) -> Result<()> {
    pattern.check_pairs_with(&object.grid)?;
    if pupil.grid.side_px != object.grid.side_px || defocus.grid.side_px != object.grid.side_px {
        return Err(Error::Dimension("transfer grids must match the object grid".into()));
    }
    if matches!(pattern, SpecklePattern::RealIntensity { .. }) {
        return Err(Error::Input("coherent channel needs a complex field pattern".into()));
    }
    Ok(())
}

/// Coherent field at the image plane for one acquisition.
pub(crate) fn coherent_field(
    object: &Array2<Complex64>,
    pattern: &Array2<Complex64>,
    pattern_grid: Grid2D,
    pupil: &Array2<Complex64>,
    defocus: &Array2<Complex64>,
    shift: Shift2,
) -> Result<(Array2<Complex64>, Array2<Complex64>)> {
    let m = object.nrows();
    let illum = illumination(pattern, pattern_grid, m, shift)?;
    let mut product = illum.clone();
    product.zip_mut_with(object, |c, o| *c *= o);
    let mut spec = fft2(&product)?;
    spec.zip_mut_with(pupil, |s, p| *s *= p);
    spec.zip_mut_with(defocus, |s, d| *s *= d);
    let g = ifft2(&spec)?;
    Ok((illum, g))
}

/// Coherent forward model: complex field at the image plane and its
/// intensity.
pub fn forward_coherent(
    object: &ComplexField,
    pattern: &SpecklePattern,
    pupil: &TransferFunction,
    defocus: &TransferFunction,
    shift: Shift2,
) -> Result<(ComplexField, RealImage)> {
    check_coherent_inputs(object, pattern, pupil, defocus)?;
    let pattern_c = pattern_as_complex(pattern);
    let (_, g) = coherent_field(
        &object.values,
        &pattern_c,
        *pattern.grid(),
        &pupil.values,
        &defocus.values,
        shift,
    )?;
    let intensity = g.mapv(|v| v.norm_sqr());
    Ok((
        ComplexField::new(object.grid, g)?,
        RealImage::new(object.grid, intensity)?,
    ))
}

/// Amplitude-based cost `sum (sqrt(I_obs) - |g|)^2`.
pub fn cost_coherent(
    observed: &RealImage,
    object: &ComplexField,
    pattern: &SpecklePattern,
    pupil: &TransferFunction,
    defocus: &TransferFunction,
    shift: Shift2,
) -> Result<f64> {
    observed.check_nonnegative()?;
    check_coherent_inputs(object, pattern, pupil, defocus)?;
    let (g, _) = forward_coherent(object, pattern, pupil, defocus, shift)?;
    Ok(observed
        .values
        .iter()
        .zip(g.values.iter())
        .map(|(&i, gv)| {
            let d = i.sqrt() - gv.norm();
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Grid2D, TransferKind};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, 1.0).unwrap()
    }

    fn ones_transfer(g: Grid2D, kind: TransferKind) -> TransferFunction {
        let n = g.side_px;
        TransferFunction::new(g, kind, Array2::from_elem((n, n), Complex64::new(1.0, 0.0)))
            .unwrap()
    }

    fn random_real(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0))
    }

    fn random_complex(n: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn random_otf(g: Grid2D, seed: u64) -> TransferFunction {
        // Hermitian-symmetric random OTF so the PSF is real.
        let psf = random_real(g.side_px, seed);
        let spec = crate::fft::fft2_real(&psf).unwrap();
        let dc = spec[(0, 0)];
        TransferFunction::new(g, TransferKind::IncoherentOtf, spec.mapv(|v| v / dc)).unwrap()
    }

    #[test]
    fn identity_chain_returns_object() {
        let gm = grid(4);
        let gn = grid(8);
        let o = RealImage::new(gm, random_real(4, 1)).unwrap();
        let p = SpecklePattern::real(gn, Array2::ones((8, 8))).unwrap();
        let otf = ones_transfer(gm, TransferKind::IncoherentOtf);
        let out = forward_fluor(&o, &p, &otf, Shift2::default()).unwrap();
        let err = (&out.values - &o.values).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn matches_naive_spatial_sum_for_integer_shift() {
        let gm = grid(4);
        let gn = grid(8);
        let o = random_real(4, 2);
        let p = random_real(8, 3);
        let otf = random_otf(gm, 4);
        let shift = Shift2::new(2.0, -1.0);

        let out = forward_fluor(
            &RealImage::new(gm, o.clone()).unwrap(),
            &SpecklePattern::real(gn, p.clone()).unwrap(),
            &otf,
            shift,
        )
        .unwrap();

        // naive: y[x] = sum_{x'} h[(x - x') mod M] * o[x'] * p[(x' + off - r) mod N]
        let h = ifft2(&otf.values).unwrap();
        let off = 2usize; // (8 - 4) / 2
        let wrap = |v: i64, n: i64| -> usize { (((v % n) + n) % n) as usize };
        for y in 0..4i64 {
            for x in 0..4i64 {
                let mut acc = 0.0;
                for yp in 0..4i64 {
                    for xp in 0..4i64 {
                        let hk = h[(wrap(y - yp, 4), wrap(x - xp, 4))].re;
                        let pv = p[(
                            wrap(yp + off as i64 - (-1), 8),
                            wrap(xp + off as i64 - 2, 8),
                        )];
                        acc += hk * o[(yp as usize, xp as usize)] * pv;
                    }
                }
                let got = out.values[(y as usize, x as usize)];
                assert!((got - acc).abs() < 1e-12, "({y},{x}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn cost_zero_iff_exact_match() {
        let gm = grid(4);
        let gn = grid(8);
        let o = RealImage::new(gm, random_real(4, 5)).unwrap();
        let p = SpecklePattern::real(gn, random_real(8, 6)).unwrap();
        let otf = random_otf(gm, 7);
        let s = Shift2::new(1.0, 1.0);
        let obs = forward_fluor(&o, &p, &otf, s).unwrap();
        let c = cost_fluor(&obs, &o, &p, &otf, s).unwrap();
        assert!(c < 1e-20, "cost {c}");

        // constant offset c on M^2 pixels costs c^2 M^2
        let shifted_obs =
            RealImage::new(gm, obs.values.mapv(|v| v + 0.5)).unwrap();
        let c2 = cost_fluor(&shifted_obs, &o, &p, &otf, s).unwrap();
        assert!((c2 - 0.25 * 16.0).abs() < 1e-10);
    }

    #[test]
    fn linearity_in_object() {
        let gm = grid(4);
        let gn = grid(8);
        let o1 = random_real(4, 8);
        let o2 = random_real(4, 9);
        let p = SpecklePattern::real(gn, random_real(8, 10)).unwrap();
        let otf = random_otf(gm, 11);
        let s = Shift2::new(0.0, 2.0);
        let f = |o: &Array2<f64>| {
            forward_fluor(&RealImage::new(gm, o.clone()).unwrap(), &p, &otf, s)
                .unwrap()
                .values
        };
        let combined = f(&(&o1 * 0.7 + &o2 * 1.3));
        let separate = f(&o1) * 0.7 + &(f(&o2) * 1.3);
        let err = (&combined - &separate).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    /// Nonnegative pattern without Nyquist energy, so fractional shifts are
    /// exactly real-valued.
    fn band_limited_positive(n: usize, seed: u64) -> Array2<f64> {
        let g = grid(n);
        let mut spec = crate::fft::fft2_real(&random_real(n, seed)).unwrap();
        for ((qy, qx), v) in spec.indexed_iter_mut() {
            let fy = g.signed_freq_index(qy) as f64 / n as f64;
            let fx = g.signed_freq_index(qx) as f64 / n as f64;
            if fx.hypot(fy) > 0.3 {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let field = ifft2(&spec).unwrap().mapv(|v| v.re);
        let min = field.iter().copied().fold(f64::INFINITY, f64::min);
        // a constant offset only moves the DC bin, preserving band limits
        field.mapv(|v| v - min + 0.05)
    }

    #[test]
    fn shift_consistency_with_preshifted_pattern() {
        let gm = grid(8);
        let gn = grid(16);
        let o = RealImage::new(gm, random_real(8, 12)).unwrap();
        let p_raw = band_limited_positive(16, 13);
        let otf = random_otf(gm, 14);
        let s = Shift2::new(1.5, -2.25);

        let p = SpecklePattern::real(gn, p_raw.clone()).unwrap();
        let moved = crate::ops::subpixel_shift(&p, s).unwrap();
        // via complex path to avoid clipping concerns
        let a = {
            let pc = pattern_as_complex(&p);
            let (_, y) = fluor_prediction(&o.values, &pc, gn, &otf.values, s).unwrap();
            y
        };
        let b = {
            let pc = pattern_as_complex(&moved);
            let (_, y) =
                fluor_prediction(&o.values, &pc, gn, &otf.values, Shift2::default()).unwrap();
            y
        };
        let err = (&a - &b).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "max err {err}");
    }

    #[test]
    fn mean_bounded_by_dc_gain() {
        // pixel 0.5 um so the incoherent cutoff fits under Nyquist
        let gm = Grid2D::new(8, 0.5).unwrap();
        let gn = Grid2D::new(16, 0.5).unwrap();
        let o = RealImage::new(gm, random_real(8, 15)).unwrap();
        let p = SpecklePattern::real(gn, random_real(16, 16)).unwrap();
        let cfg = OpticalTest::default().0;
        let otf = crate::ops::make_incoherent_otf(&cfg, gm).unwrap();
        let out = forward_fluor(&o, &p, &otf, Shift2::new(1.0, 0.0)).unwrap();

        let pc = pattern_as_complex(&p);
        let illum = illumination(&pc, gn, 8, Shift2::new(1.0, 0.0)).unwrap();
        let product_mean: f64 = o
            .values
            .iter()
            .zip(illum.iter())
            .map(|(&ov, c)| ov * c.re)
            .sum::<f64>()
            / 64.0;
        let out_mean = out.values.sum() / 64.0;
        assert!(out_mean <= product_mean + 1e-12);
    }

    struct OpticalTest(crate::types::OpticalConfig);
    impl Default for OpticalTest {
        fn default() -> Self {
            Self(crate::types::OpticalConfig {
                lambda_ex: 0.532,
                lambda_em: 0.605,
                na_sys: 0.2,
                na_illum: 0.3,
                defocus_planes: vec![0.0],
                medium_index: 1.0,
            })
        }
    }

    #[test]
    fn coherent_identity_chain() {
        let gm = grid(4);
        let gn = grid(8);
        let o = ComplexField::new(gm, random_complex(4, 17)).unwrap();
        let p = SpecklePattern::complex(gn, Array2::from_elem((8, 8), Complex64::new(1.0, 0.0)))
            .unwrap();
        let pupil = ones_transfer(gm, TransferKind::CoherentPupil);
        let defocus = ones_transfer(gm, TransferKind::DefocusFactor);
        let (_, intensity) =
            forward_coherent(&o, &p, &pupil, &defocus, Shift2::default()).unwrap();
        for (i, ov) in intensity.values.iter().zip(o.values.iter()) {
            assert!((i - ov.norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn global_phase_leaves_intensity_unchanged() {
        let gm = grid(4);
        let gn = grid(8);
        let o = random_complex(4, 18);
        let p = SpecklePattern::complex(gn, random_complex(8, 19)).unwrap();
        let pupil = ones_transfer(gm, TransferKind::CoherentPupil);
        let defocus = ones_transfer(gm, TransferKind::DefocusFactor);
        let s = Shift2::new(0.5, 1.0);
        let i1 = forward_coherent(
            &ComplexField::new(gm, o.clone()).unwrap(),
            &p,
            &pupil,
            &defocus,
            s,
        )
        .unwrap()
        .1;
        let rotated = o.mapv(|v| v * Complex64::from_polar(1.0, 0.83));
        let i2 = forward_coherent(
            &ComplexField::new(gm, rotated).unwrap(),
            &p,
            &pupil,
            &defocus,
            s,
        )
        .unwrap()
        .1;
        let err = (&i1.values - &i2.values).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn coherent_cost_algebra() {
        let gm = grid(4);
        let gn = grid(8);
        let o = ComplexField::new(gm, random_complex(4, 20)).unwrap();
        let p = SpecklePattern::complex(gn, random_complex(8, 21)).unwrap();
        let pupil = ones_transfer(gm, TransferKind::CoherentPupil);
        let defocus = ones_transfer(gm, TransferKind::DefocusFactor);
        let s = Shift2::new(1.0, -1.0);
        let (g, i) = forward_coherent(&o, &p, &pupil, &defocus, s).unwrap();
        let exact = cost_coherent(&i, &o, &p, &pupil, &defocus, s).unwrap();
        assert!(exact < 1e-18);

        // |g| = sqrt(I) + 1 everywhere -> cost M^2
        let inflated = RealImage::new(
            gm,
            g.values.mapv(|v| (v.norm() + 1.0).powi(2)),
        )
        .unwrap();
        let c = cost_coherent(&inflated, &o, &p, &pupil, &defocus, s).unwrap();
        assert!((c - 16.0).abs() < 1e-10);
    }

    #[test]
    fn negative_observation_rejected() {
        let gm = grid(4);
        let gn = grid(8);
        let o = ComplexField::new(gm, random_complex(4, 22)).unwrap();
        let p = SpecklePattern::complex(gn, random_complex(8, 23)).unwrap();
        let pupil = ones_transfer(gm, TransferKind::CoherentPupil);
        let defocus = ones_transfer(gm, TransferKind::DefocusFactor);
        let mut bad = Array2::zeros((4, 4));
        bad[(0, 0)] = -1.0;
        let obs = RealImage { grid: gm, values: bad };
        assert!(cost_coherent(&obs, &o, &p, &pupil, &defocus, Shift2::default()).is_err());
    }
}
