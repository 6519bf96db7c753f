//! Dense-matrix reference implementations of every operator and gradient.
//!
//! Each linear operator (DFT, crop, subpixel shift, transfer convolution) is
//! materialized as an explicit matrix built directly from its defining
//! formula, never from the FFT code paths; forward models and gradients then
//! reduce to matrix products and explicit adjoints (conjugate transposes).
//! This gives an independent cross-check of the production implementations.
//! Sizes are capped because the matrices are O(n^4).

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grad::AMPLITUDE_EPS;
use crate::ops::ShiftAxis;
use crate::types::{Grid2D, Shift2};

/// Largest object side the dense engine accepts.
pub const MAX_OBJECT_SIDE: usize = 6;
/// Largest pattern side the dense engine accepts.
pub const MAX_PATTERN_SIDE: usize = 10;

fn check_side(side: usize, cap: usize, what: &str) -> Result<()> {
    if side > cap {
        return Err(Error::Dimension(format!(
            "dense oracle caps the {what} side at {cap}, got {side}"
        )));
    }
    Ok(())
}

/// Row-major vectorization `i = y * n + x`.
pub fn vectorize(a: &Array2<Complex64>) -> Array1<Complex64> {
    Array1::from_iter(a.iter().copied())
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &Array1<Complex64>, n: usize) -> Array2<Complex64> {
    Array2::from_shape_vec((n, n), v.to_vec()).expect("length n^2")
}

/// Unnormalized forward 2D DFT as an n^2 x n^2 matrix,
/// `F[(uy,ux),(y,x)] = exp(-j 2 pi (uy y + ux x) / n)`.
pub fn dft_matrix(n: usize) -> Array2<Complex64> {
    let mut f = Array2::zeros((n * n, n * n));
    for uy in 0..n {
        for ux in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let phase = -2.0 * PI * ((uy * y + ux * x) as f64) / n as f64;
                    f[(uy * n + ux, y * n + x)] = Complex64::from_polar(1.0, phase);
                }
            }
        }
    }
    f
}

/// Inverse 2D DFT matrix carrying the full 1/n^2 factor.
pub fn idft_matrix(n: usize) -> Array2<Complex64> {
    let norm = 1.0 / (n * n) as f64;
    let mut f = Array2::zeros((n * n, n * n));
    for y in 0..n {
        for x in 0..n {
            for uy in 0..n {
                for ux in 0..n {
                    let phase = 2.0 * PI * ((uy * y + ux * x) as f64) / n as f64;
                    f[(y * n + x, uy * n + ux)] = Complex64::from_polar(norm, phase);
                }
            }
        }
    }
    f
}

/// Centered crop from an n-grid to an m-grid as an m^2 x n^2 selection matrix.
pub fn crop_matrix(m: usize, n: usize) -> Result<Array2<Complex64>> {
    if m > n {
        return Err(Error::Dimension(format!("crop target {m} exceeds source {n}")));
    }
    let off = (n - m) / 2;
    let mut q = Array2::zeros((m * m, n * n));
    for y in 0..m {
        for x in 0..m {
            q[(y * m + x, (y + off) * n + (x + off))] = Complex64::new(1.0, 0.0);
        }
    }
    Ok(q)
}

/// Diagonal of the Fourier-domain shift kernel for `grid`, as a vector in
/// bin order, `exp(-j 2 pi (fx sx + fy sy))` with `f = signed index / n`.
fn shift_kernel_diag(grid: Grid2D, shift: Shift2) -> Array1<Complex64> {
    let n = grid.side_px;
    let mut d = Array1::zeros(n * n);
    for qy in 0..n {
        for qx in 0..n {
            let fy = grid.signed_freq_index(qy) as f64 / n as f64;
            let fx = grid.signed_freq_index(qx) as f64 / n as f64;
            d[qy * n + qx] =
                Complex64::from_polar(1.0, -2.0 * PI * (fx * shift.x + fy * shift.y));
        }
    }
    d
}

fn diag_times(d: &Array1<Complex64>, m: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = m.clone();
    for (mut row, dv) in out.rows_mut().into_iter().zip(d.iter()) {
        row.mapv_inplace(|v| v * dv);
    }
    out
}

/// Dense subpixel-shift operator `S(r) = F^-1 diag(e(r)) F`.
pub fn shift_matrix(grid: Grid2D, shift: Shift2) -> Array2<Complex64> {
    let n = grid.side_px;
    let d = shift_kernel_diag(grid, shift);
    idft_matrix(n).dot(&diag_times(&d, &dft_matrix(n)))
}

/// Dense derivative of [`shift_matrix`] with respect to one shift component:
/// `F^-1 diag(-j 2 pi u_q / n) diag(e(r)) F`.
pub fn shift_derivative_matrix(grid: Grid2D, shift: Shift2, axis: ShiftAxis) -> Array2<Complex64> {
    let n = grid.side_px;
    let mut d = shift_kernel_diag(grid, shift);
    for qy in 0..n {
        for qx in 0..n {
            let q = match axis {
                ShiftAxis::X => grid.signed_freq_index(qx),
                ShiftAxis::Y => grid.signed_freq_index(qy),
            };
            d[qy * n + qx] *= Complex64::new(0.0, -2.0 * PI * q as f64 / n as f64);
        }
    }
    idft_matrix(n).dot(&diag_times(&d, &dft_matrix(n)))
}

/// Dense circular convolution with a frequency response,
/// `H = F^-1 diag(h) F`.
pub fn transfer_matrix(h: &Array2<Complex64>) -> Array2<Complex64> {
    let n = h.nrows();
    let d = vectorize(h);
    idft_matrix(n).dot(&diag_times(&d, &dft_matrix(n)))
}

fn conj_transpose(m: &Array2<Complex64>) -> Array2<Complex64> {
    m.t().mapv(|v| v.conj())
}

fn hadamard(a: &Array1<Complex64>, b: &Array1<Complex64>) -> Array1<Complex64> {
    let mut out = a.clone();
    out.zip_mut_with(b, |x, y| *x *= y);
    out
}

/// Inputs of one dense fluorescence evaluation.
pub struct DenseFluor<'a> {
    pub object: &'a Array2<f64>,
    pub pattern: &'a Array2<Complex64>,
    pub pattern_grid: Grid2D,
    pub otf: &'a Array2<Complex64>,
    pub shift: Shift2,
    pub observed: &'a Array2<f64>,
}

/// Outputs of the dense fluorescence evaluation, matching the conventions of
/// [`crate::grad::grad_fluor`].
pub struct DenseFluorOut {
    pub prediction: Array2<Complex64>,
    pub cost: f64,
    pub d_object: Array2<f64>,
    pub d_pattern: Array2<f64>,
    pub d_otf: Array2<Complex64>,
    pub d_position: Shift2,
}

/// Dense forward model, cost and all four gradients for the fluorescence
/// channel.
pub fn dense_fluor(inp: &DenseFluor<'_>) -> Result<DenseFluorOut> {
    let m = inp.object.nrows();
    let n = inp.pattern_grid.side_px;
    check_side(m, MAX_OBJECT_SIDE, "object")?;
    check_side(n, MAX_PATTERN_SIDE, "pattern")?;

    let s = shift_matrix(inp.pattern_grid, inp.shift);
    let q = crop_matrix(m, n)?;
    let h = transfer_matrix(inp.otf);
    let f_m = dft_matrix(m);
    let f_m_inv = idft_matrix(m);

    let p_vec = vectorize(inp.pattern);
    let o_vec = Array1::from_iter(inp.object.iter().map(|&v| Complex64::new(v, 0.0)));
    let i_vec = Array1::from_iter(inp.observed.iter().map(|&v| Complex64::new(v, 0.0)));

    let c = q.dot(&s.dot(&p_vec));
    let oc = hadamard(&o_vec, &c);
    let y = h.dot(&oc);
    let rho = &i_vec - &y;
    let cost = rho.iter().map(|v| v.norm_sqr()).sum();

    let h_adj_rho = conj_transpose(&h).dot(&rho);

    let d_object_vec = hadamard(&c.mapv(|v| v.conj()), &h_adj_rho).mapv(|v| -2.0 * v.re);
    let d_object = Array2::from_shape_vec((m, m), d_object_vec.to_vec()).unwrap();

    let d_pattern_vec = conj_transpose(&s)
        .dot(&q.t().dot(&hadamard(&o_vec, &h_adj_rho)))
        .mapv(|v| -2.0 * v.re);
    let d_pattern = Array2::from_shape_vec((n, n), d_pattern_vec.to_vec()).unwrap();

    // y = F^-1 diag(xi) h_tilde  =>  g = -diag(conj xi) (F^-1)^H rho
    let xi = f_m.dot(&oc);
    let d_otf_vec = hadamard(&xi.mapv(|v| v.conj()), &conj_transpose(&f_m_inv).dot(&rho))
        .mapv(|v| -v);
    let d_otf = unvectorize(&d_otf_vec, m);

    let mut d_position = Shift2::default();
    for axis in [ShiftAxis::X, ShiftAxis::Y] {
        let ds = shift_derivative_matrix(inp.pattern_grid, inp.shift, axis);
        let dy = h.dot(&hadamard(&o_vec, &q.dot(&ds.dot(&p_vec))));
        let total: Complex64 = rho.iter().zip(dy.iter()).map(|(r, d)| r.conj() * d).sum();
        match axis {
            ShiftAxis::X => d_position.x = -2.0 * total.re,
            ShiftAxis::Y => d_position.y = -2.0 * total.re,
        }
    }

    Ok(DenseFluorOut {
        prediction: unvectorize(&y, m),
        cost,
        d_object,
        d_pattern,
        d_otf,
        d_position,
    })
}

/// Inputs of one dense coherent evaluation.
pub struct DenseCoherent<'a> {
    pub object: &'a Array2<Complex64>,
    pub pattern: &'a Array2<Complex64>,
    pub pattern_grid: Grid2D,
    pub pupil: &'a Array2<Complex64>,
    pub defocus: &'a Array2<Complex64>,
    pub shift: Shift2,
    pub observed: &'a Array2<f64>,
}

/// Outputs of the dense coherent evaluation, matching
/// [`crate::grad::grad_coherent`].
pub struct DenseCoherentOut {
    pub field: Array2<Complex64>,
    pub cost: f64,
    pub d_object: Array2<Complex64>,
    pub d_pattern: Array2<Complex64>,
    pub d_pupil: Array2<Complex64>,
    pub d_position: Shift2,
}

/// Dense forward model, amplitude cost and all four gradients for the
/// coherent channel.
pub fn dense_coherent(inp: &DenseCoherent<'_>) -> Result<DenseCoherentOut> {
    let m = inp.object.nrows();
    let n = inp.pattern_grid.side_px;
    check_side(m, MAX_OBJECT_SIDE, "object")?;
    check_side(n, MAX_PATTERN_SIDE, "pattern")?;

    let s = shift_matrix(inp.pattern_grid, inp.shift);
    let q = crop_matrix(m, n)?;
    let mut combined = inp.pupil.clone();
    combined.zip_mut_with(inp.defocus, |p, d| *p *= d);
    let t = transfer_matrix(&combined);
    let f_m = dft_matrix(m);
    let f_m_inv = idft_matrix(m);

    let p_vec = vectorize(inp.pattern);
    let o_vec = vectorize(inp.object);

    let c = q.dot(&s.dot(&p_vec));
    let oc = hadamard(&o_vec, &c);
    let g = t.dot(&oc);

    let mut cost = 0.0;
    let mut w = Array1::zeros(m * m);
    for ((wv, gv), &i_obs) in w.iter_mut().zip(g.iter()).zip(inp.observed.iter()) {
        let amp = gv.norm();
        let target = i_obs.sqrt();
        cost += (target - amp) * (target - amp);
        *wv = (target / amp.max(AMPLITUDE_EPS) - 1.0) * gv;
    }

    let t_adj_w = conj_transpose(&t).dot(&w);

    let d_object_vec = hadamard(&c.mapv(|v| v.conj()), &t_adj_w).mapv(|v| -v);
    let d_pattern_vec = conj_transpose(&s)
        .dot(&q.t().dot(&hadamard(&o_vec.mapv(|v| v.conj()), &t_adj_w)))
        .mapv(|v| -v);

    let xi = f_m.dot(&oc);
    let defocus_vec = vectorize(inp.defocus);
    let d_pupil_vec = hadamard(
        &hadamard(&xi.mapv(|v| v.conj()), &defocus_vec.mapv(|v| v.conj())),
        &conj_transpose(&f_m_inv).dot(&w),
    )
    .mapv(|v| -v);

    let mut d_position = Shift2::default();
    for axis in [ShiftAxis::X, ShiftAxis::Y] {
        let ds = shift_derivative_matrix(inp.pattern_grid, inp.shift, axis);
        let dg = t.dot(&hadamard(&o_vec, &q.dot(&ds.dot(&p_vec))));
        let total: Complex64 = w.iter().zip(dg.iter()).map(|(wv, d)| wv.conj() * d).sum();
        match axis {
            ShiftAxis::X => d_position.x = -2.0 * total.re,
            ShiftAxis::Y => d_position.y = -2.0 * total.re,
        }
    }

    Ok(DenseCoherentOut {
        field: unvectorize(&g, m),
        cost,
        d_object: unvectorize(&d_object_vec, m),
        d_pattern: unvectorize(&d_pattern_vec, n),
        d_pupil: unvectorize(&d_pupil_vec, m),
        d_position,
    })
}
