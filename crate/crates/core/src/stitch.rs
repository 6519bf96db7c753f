//! Patch-wise processing of a large field of view: partition acquisition
//! stacks into overlapping patches (each reconstructed independently, with
//! its own transfer estimate) and blend the results back into one image.
//!
//! Blending is linear feathering: per-patch weights ramp linearly across the
//! overlap, are normalized to sum to one at every pixel, and patches are
//! gain- (and, for complex data, phase-) aligned against the already-placed
//! mosaic using medians over the overlap.

use ndarray::{s, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ComplexField, Grid2D, RealImage};

/// Overlapping square tiling of a `full_px` x `full_px` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub full_px: usize,
    pub patch_px: usize,
    pub overlap_px: usize,
}

impl PatchLayout {
    pub fn new(full_px: usize, patch_px: usize, overlap_px: usize) -> Result<Self> {
        if patch_px == 0 || patch_px > full_px {
            return Err(Error::Config(format!(
                "patch size {patch_px} must be in 1..={full_px}"
            )));
        }
        if patch_px < full_px && overlap_px == 0 {
            return Err(Error::Config("multi-patch layouts need a nonzero overlap".into()));
        }
        if overlap_px >= patch_px {
            return Err(Error::Config(format!(
                "overlap {overlap_px} must be smaller than the patch {patch_px}"
            )));
        }
        Ok(Self { full_px, patch_px, overlap_px })
    }

    /// Overlap must cover at least twice the PSF radius so every feature is
    /// fully seen by some patch.
    pub fn check_psf(&self, psf_radius_px: f64) -> Result<()> {
        if self.patch_px < self.full_px && (self.overlap_px as f64) < 2.0 * psf_radius_px {
            return Err(Error::Config(format!(
                "overlap {} px is below twice the PSF radius {psf_radius_px:.1} px",
                self.overlap_px
            )));
        }
        if (self.patch_px as f64) < 4.0 * psf_radius_px {
            return Err(Error::Config(format!(
                "patch {} px is below twice the PSF support {:.1} px",
                self.patch_px,
                2.0 * psf_radius_px
            )));
        }
        Ok(())
    }

    /// 1D origins along one axis: stride `patch - overlap`, last origin
    /// clamped so the tiling ends exactly at the field edge.
    pub fn axis_origins(&self) -> Vec<usize> {
        if self.patch_px == self.full_px {
            return vec![0];
        }
        let stride = self.patch_px - self.overlap_px;
        let mut origins = Vec::new();
        let mut o = 0usize;
        loop {
            if o + self.patch_px >= self.full_px {
                origins.push(self.full_px - self.patch_px);
                break;
            }
            origins.push(o);
            o += stride;
        }
        origins
    }

    /// Row-major (row origin, col origin) pairs of every patch.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let axis = self.axis_origins();
        let mut out = Vec::with_capacity(axis.len() * axis.len());
        for &r in &axis {
            for &c in &axis {
                out.push((r, c));
            }
        }
        out
    }

    pub fn n_patches(&self) -> usize {
        let n = self.axis_origins().len();
        n * n
    }
}

/// Crop every frame of an acquisition stack to each patch window.
/// Returns one stack per patch, in [`PatchLayout::origins`] order.
pub fn partition_stack(
    stack: &[RealImage],
    layout: &PatchLayout,
) -> Result<Vec<Vec<RealImage>>> {
    if stack.is_empty() {
        return Err(Error::Input("cannot partition an empty stack".into()));
    }
    let full = stack[0].grid;
    if full.side_px != layout.full_px {
        return Err(Error::Dimension(format!(
            "stack is {} px, layout expects {}",
            full.side_px, layout.full_px
        )));
    }
    let patch_grid = Grid2D::new(layout.patch_px, full.pixel_size)?;
    let mut out = Vec::with_capacity(layout.n_patches());
    for (r0, c0) in layout.origins() {
        let mut patch_stack = Vec::with_capacity(stack.len());
        for frame in stack {
            let window = frame
                .values
                .slice(s![r0..r0 + layout.patch_px, c0..c0 + layout.patch_px])
                .to_owned();
            patch_stack.push(RealImage::new(patch_grid, window)?);
        }
        out.push(patch_stack);
    }
    Ok(out)
}

/// Separable feather weight along one axis for a patch at `origin`:
/// linear 0 -> 1 ramp over the overlap at interior edges, flat 1 at edges
/// that touch the field border.
fn axis_weight(layout: &PatchLayout, origin: usize) -> Vec<f64> {
    let p = layout.patch_px;
    let ov = layout.overlap_px;
    let mut w = vec![1.0; p];
    if ov == 0 {
        return w;
    }
    let ramp = |i: usize| (i + 1) as f64 / (ov + 1) as f64;
    if origin > 0 {
        for (i, wv) in w.iter_mut().take(ov).enumerate() {
            *wv *= ramp(i);
        }
    }
    if origin + p < layout.full_px {
        for i in 0..ov {
            w[p - 1 - i] *= ramp(i);
        }
    }
    w
}

/// Normalized blend-weight maps, one per patch; at every pixel the weights
/// sum to exactly one.
pub fn blend_weights(layout: &PatchLayout) -> Vec<Array2<f64>> {
    let origins = layout.origins();
    let mut total = Array2::<f64>::zeros((layout.full_px, layout.full_px));
    let mut raw = Vec::with_capacity(origins.len());
    for &(r0, c0) in &origins {
        let wr = axis_weight(layout, r0);
        let wc = axis_weight(layout, c0);
        let mut w = Array2::<f64>::zeros((layout.full_px, layout.full_px));
        for (i, &a) in wr.iter().enumerate() {
            for (j, &b) in wc.iter().enumerate() {
                w[(r0 + i, c0 + j)] = a * b;
            }
        }
        total += &w;
        raw.push(w);
    }
    for w in &mut raw {
        w.zip_mut_with(&total, |v, &t| *v /= t);
    }
    raw
}

fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Blend real-valued patch reconstructions into the full field.
/// Patches are gain-normalized by the median ratio against the
/// already-placed mosaic in their overlap before being feathered in.
pub fn blend_real(patches: &[RealImage], layout: &PatchLayout) -> Result<RealImage> {
    let origins = layout.origins();
    if patches.len() != origins.len() {
        return Err(Error::Dimension(format!(
            "{} patches for a {}-patch layout",
            patches.len(),
            origins.len()
        )));
    }
    let pixel_size = patches[0].grid.pixel_size;
    for p in patches {
        if p.grid.side_px != layout.patch_px {
            return Err(Error::Dimension("patch size does not match the layout".into()));
        }
        if p.grid.pixel_size != pixel_size {
            return Err(Error::Config("patches must share one pixel scale".into()));
        }
    }

    let weights = blend_weights(layout);
    let full = layout.full_px;
    let mut out = Array2::<f64>::zeros((full, full));
    // unweighted gain-aligned values of earlier patches, for ratio estimation
    let mut reference = Array2::<f64>::zeros((full, full));
    let mut covered = Array2::<bool>::from_elem((full, full), false);

    for ((patch, w), &(r0, c0)) in patches.iter().zip(&weights).zip(&origins) {
        let mut ratios = Vec::new();
        for (i, row) in patch.values.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (rr, cc) = (r0 + i, c0 + j);
                if covered[(rr, cc)] && reference[(rr, cc)].abs() > 1e-9 && v.abs() > 1e-9 {
                    ratios.push(reference[(rr, cc)] / v);
                }
            }
        }
        let gain = if ratios.is_empty() { 1.0 } else { median(ratios) };

        for (i, row) in patch.values.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (rr, cc) = (r0 + i, c0 + j);
                out[(rr, cc)] += w[(rr, cc)] * gain * v;
                if !covered[(rr, cc)] {
                    reference[(rr, cc)] = gain * v;
                    covered[(rr, cc)] = true;
                }
            }
        }
    }
    RealImage::new(Grid2D::new(full, pixel_size)?, out)
}

/// Blend complex patches: each patch is first phase-aligned (and gain-
/// aligned) against the placed mosaic by the median phase difference and
/// amplitude ratio over its overlap, then feathered.
pub fn blend_complex(patches: &[ComplexField], layout: &PatchLayout) -> Result<ComplexField> {
    let origins = layout.origins();
    if patches.len() != origins.len() {
        return Err(Error::Dimension(format!(
            "{} patches for a {}-patch layout",
            patches.len(),
            origins.len()
        )));
    }
    let pixel_size = patches[0].grid.pixel_size;
    for p in patches {
        if p.grid.side_px != layout.patch_px {
            return Err(Error::Dimension("patch size does not match the layout".into()));
        }
        if p.grid.pixel_size != pixel_size {
            return Err(Error::Config("patches must share one pixel scale".into()));
        }
    }

    let weights = blend_weights(layout);
    let full = layout.full_px;
    let mut out = Array2::<Complex64>::zeros((full, full));
    let mut reference = Array2::<Complex64>::zeros((full, full));
    let mut covered = Array2::<bool>::from_elem((full, full), false);

    for ((patch, w), &(r0, c0)) in patches.iter().zip(&weights).zip(&origins) {
        let mut phase_diffs = Vec::new();
        let mut gains = Vec::new();
        for (i, row) in patch.values.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (rr, cc) = (r0 + i, c0 + j);
                let r = reference[(rr, cc)];
                if covered[(rr, cc)] && r.norm() > 1e-9 && v.norm() > 1e-9 {
                    phase_diffs.push((r * v.conj()).arg());
                    gains.push(r.norm() / v.norm());
                }
            }
        }
        let align = if phase_diffs.is_empty() {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(median(gains), median(phase_diffs))
        };

        for (i, row) in patch.values.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (rr, cc) = (r0 + i, c0 + j);
                let aligned = align * v;
                out[(rr, cc)] += aligned * w[(rr, cc)];
                if !covered[(rr, cc)] {
                    reference[(rr, cc)] = aligned;
                    covered[(rr, cc)] = true;
                }
            }
        }
    }
    ComplexField::new(Grid2D::new(full, pixel_size)?, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, 1.0).unwrap()
    }

    #[test]
    fn single_patch_is_passthrough() {
        let layout = PatchLayout::new(8, 8, 0).unwrap();
        let img = RealImage::new(
            grid(8),
            Array2::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) as f64),
        )
        .unwrap();
        let patches = partition_stack(&[img.clone()], &layout).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0][0], img);
        let blended = blend_real(&[img.clone()], &layout).unwrap();
        assert_eq!(blended.values, img.values);
    }

    #[test]
    fn two_by_two_layout_tiles_the_field() {
        // 16 px field, 10 px patches, 4 px overlap -> origins {0, 6}
        let layout = PatchLayout::new(16, 10, 4).unwrap();
        assert_eq!(layout.axis_origins(), vec![0, 6]);
        assert_eq!(layout.n_patches(), 4);
        let mut covered = Array2::<usize>::zeros((16, 16));
        for (r0, c0) in layout.origins() {
            for i in 0..10 {
                for j in 0..10 {
                    covered[(r0 + i, c0 + j)] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&c| c >= 1));
    }

    #[test]
    fn blend_weights_sum_to_one() {
        let layout = PatchLayout::new(20, 12, 4).unwrap();
        let weights = blend_weights(&layout);
        let mut total = Array2::<f64>::zeros((20, 20));
        for w in &weights {
            total += w;
        }
        for (idx, v) in total.indexed_iter() {
            assert!((v - 1.0).abs() < 1e-12, "pixel {idx:?}: weight sum {v}");
        }
    }

    #[test]
    fn identical_constant_patches_blend_to_constant() {
        let layout = PatchLayout::new(16, 10, 4).unwrap();
        let patch = RealImage::new(grid(10), Array2::from_elem((10, 10), 3.5)).unwrap();
        let patches = vec![patch; 4];
        let blended = blend_real(&patches, &layout).unwrap();
        for v in blended.values.iter() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_mismatch_is_normalized_out() {
        // two patches of the same smooth ground truth with gains 1 and 2
        let full = 16usize;
        let truth = Array2::from_shape_fn((full, full), |(r, c)| {
            5.0 + (r as f64 * 0.3).sin() + (c as f64 * 0.2).cos()
        });
        let layout = PatchLayout::new(full, 10, 4).unwrap();
        let origins = layout.origins();
        let mut patches = Vec::new();
        for (idx, &(r0, c0)) in origins.iter().enumerate() {
            let gain = if idx == 0 { 1.0 } else { 2.0 };
            let window = truth
                .slice(s![r0..r0 + 10, c0..c0 + 10])
                .mapv(|v| gain * v);
            patches.push(RealImage::new(grid(10), window).unwrap());
        }
        let blended = blend_real(&patches, &layout).unwrap();
        // seam step below 1% of signal everywhere
        let max_rel = blended
            .values
            .iter()
            .zip(truth.iter())
            .map(|(b, t)| (b - t).abs() / t)
            .fold(0.0, f64::max);
        assert!(max_rel < 0.01, "max relative error {max_rel}");
    }

    #[test]
    fn complex_patches_phase_align_before_blending() {
        let full = 16usize;
        let truth = Array2::from_shape_fn((full, full), |(r, c)| {
            Complex64::from_polar(1.0, 0.1 * (r as f64) - 0.07 * (c as f64))
        });
        let layout = PatchLayout::new(full, 10, 4).unwrap();
        let origins = layout.origins();
        let mut patches = Vec::new();
        for (idx, &(r0, c0)) in origins.iter().enumerate() {
            // each patch has an arbitrary global phase
            let spin = Complex64::from_polar(1.0, 0.9 * idx as f64);
            let window = truth
                .slice(s![r0..r0 + 10, c0..c0 + 10])
                .mapv(|v| v * spin);
            patches.push(ComplexField::new(grid(10), window).unwrap());
        }
        let blended = blend_complex(&patches, &layout).unwrap();
        // agreement up to one global phase: project out the best rotation
        let inner: Complex64 = blended
            .values
            .iter()
            .zip(truth.iter())
            .map(|(b, t)| t.conj() * b)
            .sum();
        let rot = inner / inner.norm();
        let err = blended
            .values
            .iter()
            .zip(truth.iter())
            .map(|(b, t)| (b * rot.conj() - t).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error after phase alignment {err}");
    }

    #[test]
    fn layout_guards() {
        assert!(PatchLayout::new(16, 20, 2).is_err());
        assert!(PatchLayout::new(16, 8, 8).is_err());
        assert!(PatchLayout::new(16, 8, 0).is_err());
        let tight = PatchLayout::new(32, 16, 2).unwrap();
        assert!(tight.check_psf(4.0).is_err());
        let ok = PatchLayout::new(64, 32, 16).unwrap();
        assert!(ok.check_psf(4.0).is_ok());
    }
}
