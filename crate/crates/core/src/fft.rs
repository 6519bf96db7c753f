//! 2D FFT contract used by every operator in the crate.
//!
//! Convention, declared once and used everywhere: the forward transform is
//! unnormalized (DC bin of an all-ones n x n field is n^2), the inverse
//! carries the full 1/n^2 factor, so `ifft2(fft2(x)) == x`. Parseval then
//! reads `sum |X|^2 = n^2 * sum |x|^2`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::types::ComplexField;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    let key = (n, matches!(direction, FftDirection::Forward));
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(key)
            .or_insert_with(|| FftPlanner::new().plan_fft(n, direction))
            .clone()
    })
}

fn check_square(a: &Array2<Complex64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r == 0 || r != c {
        return Err(Error::Dimension(format!("FFT input must be square and nonzero, got {r}x{c}")));
    }
    Ok(r)
}

fn transform_inplace(a: &mut Array2<Complex64>, direction: FftDirection) -> Result<()> {
    let n = check_square(a)?;
    let fft = plan(n, direction);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];

    let data = a.as_slice_mut().expect("row-major layout");
    for row in data.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    // Columns: transpose, transform rows, transpose back.
    transpose_square(data, n);
    for row in data.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    transpose_square(data, n);

    if matches!(direction, FftDirection::Inverse) {
        let norm = 1.0 / (n * n) as f64;
        for v in data.iter_mut() {
            *v *= norm;
        }
    }
    Ok(())
}

fn transpose_square(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Unnormalized forward 2D DFT, in place.
pub fn fft2_inplace(a: &mut Array2<Complex64>) -> Result<()> {
    transform_inplace(a, FftDirection::Forward)
}

/// Inverse 2D DFT with the 1/n^2 normalization, in place.
pub fn ifft2_inplace(a: &mut Array2<Complex64>) -> Result<()> {
    transform_inplace(a, FftDirection::Inverse)
}

pub fn fft2(a: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let mut out = a.clone();
    fft2_inplace(&mut out)?;
    Ok(out)
}

pub fn ifft2(a: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let mut out = a.clone();
    ifft2_inplace(&mut out)?;
    Ok(out)
}

/// Forward transform of a real array.
pub fn fft2_real(a: &Array2<f64>) -> Result<Array2<Complex64>> {
    let complex = a.mapv(|v| Complex64::new(v, 0.0));
    fft2(&complex)
}

/// Typed wrapper over [`fft2`] for fields.
pub fn fft2_field(field: &ComplexField) -> Result<ComplexField> {
    Ok(ComplexField { grid: field.grid, values: fft2(&field.values)? })
}

/// Typed wrapper over [`ifft2`] for fields.
pub fn ifft2_field(field: &ComplexField) -> Result<ComplexField> {
    Ok(ComplexField { grid: field.grid, values: ifft2(&field.values)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_complex(n: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn all_ones_concentrates_at_dc() {
        let a = Array2::from_elem((4, 4), Complex64::new(1.0, 0.0));
        let f = fft2(&a).unwrap();
        assert!((f[(0, 0)] - Complex64::new(16.0, 0.0)).norm() < 1e-12);
        for (idx, v) in f.indexed_iter() {
            if idx != (0, 0) {
                assert!(v.norm() < 1e-12, "bin {idx:?} = {v}");
            }
        }
    }

    #[test]
    fn inverse_pair_round_trips() {
        let a = random_complex(8, 7);
        let back = ifft2(&fft2(&a).unwrap()).unwrap();
        let err = (&back - &a).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "max err {err}");
    }

    #[test]
    fn parseval_with_declared_normalization() {
        let a = random_complex(8, 11);
        let f = fft2(&a).unwrap();
        let e_space: f64 = a.iter().map(|v| v.norm_sqr()).sum();
        let e_freq: f64 = f.iter().map(|v| v.norm_sqr()).sum();
        assert!((e_freq - 64.0 * e_space).abs() < 1e-9 * e_freq.max(1.0));
    }

    #[test]
    fn rejects_non_square() {
        let mut a = Array2::from_elem((4, 6), Complex64::new(0.0, 0.0));
        assert!(fft2_inplace(&mut a).is_err());
        let mut z = Array2::from_elem((0, 0), Complex64::new(0.0, 0.0));
        assert!(fft2_inplace(&mut z).is_err());
    }
}
