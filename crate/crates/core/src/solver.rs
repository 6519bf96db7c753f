//! The two reconstruction algorithms: sequential gradient descent over
//! acquisitions with per-variable normalized steps, regularized transfer
//! updates, trajectory refinement and (fluorescence only) Nesterov
//! acceleration.
//!
//! Both solvers evaluate all gradients for one acquisition at the current
//! iterate, then apply the object, pattern, transfer and position updates in
//! that order before moving to the next acquisition.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{cost_coherent, cost_fluor};
use crate::grad::{grad_coherent, grad_fluor};
use crate::ops::{make_incoherent_otf, make_pupil, pad, register_subpixel, subpixel_shift_complex};
use crate::types::{
    ComplexField, Grid2D, ObjectEstimate, OpticalConfig, RealImage, ReconstructionResult,
    ScanTrajectory, Shift2, SolverConfig, SpecklePattern, TransferFunction, TransferKind,
};

/// Per-outer-iteration progress record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Outer iteration index, 1-based.
    pub iter: usize,
    /// Total cost over all acquisitions, at the evaluation points of this
    /// iteration.
    pub cost: f64,
    /// L2 norm of the accumulated object update this iteration.
    pub object_step_norm: f64,
    /// L2 norm of the accumulated pattern update this iteration.
    pub pattern_step_norm: f64,
    /// L2 norm of the accumulated transfer update this iteration.
    pub transfer_step_norm: f64,
    /// RMS trajectory change over this iteration, px.
    pub trajectory_rms_change: f64,
    /// Momentum scalar t_k (1.0 when acceleration is off).
    pub momentum_t: f64,
}

/// Momentum scalar recursion `t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`.
pub fn nesterov_next_t(t_k: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt()) / 2.0
}

/// Momentum extrapolation `x + ((t_k - 1)/t_{k+1}) (x - x_prev)`.
pub fn nesterov_update(
    current: &Array2<f64>,
    previous: &Array2<f64>,
    t_k: f64,
) -> Array2<f64> {
    assert!(t_k >= 1.0, "momentum scalar must be >= 1");
    let coeff = (t_k - 1.0) / nesterov_next_t(t_k);
    let mut out = current.clone();
    out.zip_mut_with(previous, |x, &xp| *x += coeff * (*x - xp));
    out
}

/// Trajectory initialization from the data: each frame is registered against
/// the first frame; the speckle translation shows up directly as the image
/// translation.
pub fn estimate_trajectory(stack: &[RealImage]) -> Result<ScanTrajectory> {
    if stack.is_empty() {
        return Err(Error::Input("cannot estimate a trajectory from an empty stack".into()));
    }
    let mut shifts = Vec::with_capacity(stack.len());
    for frame in stack {
        shifts.push(register_subpixel(&stack[0], frame)?);
    }
    Ok(ScanTrajectory::new(shifts))
}

/// Optional overrides for the fluorescence initialization; any `None` falls
/// back to the default (mean stack / all-ones pattern / unaberrated OTF).
#[derive(Debug, Clone, Default)]
pub struct FluorInit {
    pub object: Option<RealImage>,
    pub pattern: Option<SpecklePattern>,
    pub otf: Option<TransferFunction>,
}

/// Optional overrides for the coherent initialization; defaults are an
/// all-ones object, the registered-amplitude pattern average and an
/// unaberrated circular pupil.
#[derive(Debug, Clone, Default)]
pub struct CohInit {
    pub object: Option<ComplexField>,
    pub pattern: Option<SpecklePattern>,
    pub pupil: Option<TransferFunction>,
}

/// Frequency support of a transfer estimate, dilated by one bin (with wrap)
/// so edge bins can still be refined; updates outside it are suppressed.
fn support_mask(initial: &Array2<Complex64>) -> Array2<bool> {
    let (rows, cols) = initial.dim();
    let base = initial.mapv(|v| v.norm() > 0.0);
    let mut mask = Array2::from_elem((rows, cols), false);
    for ((r, c), out) in mask.indexed_iter_mut() {
        'search: for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = (r as i64 + dr).rem_euclid(rows as i64) as usize;
                let cc = (c as i64 + dc).rem_euclid(cols as i64) as usize;
                if base[(rr, cc)] {
                    *out = true;
                    break 'search;
                }
            }
        }
    }
    mask
}

/// Pattern pixels lying safely inside at least one crop window along the
/// trajectory. The spectral shift couples every pattern pixel to the data
/// through interpolation tails, so pixels the illumination never reaches (or
/// only grazes at a window edge) see tiny persistent gradients with near-zero
/// curvature; left unchecked they drift without bound over many sequential
/// updates. Updates outside this mask are suppressed; the excluded rim
/// carries no recoverable information.
fn pattern_update_mask(
    pattern_grid: Grid2D,
    object_grid: Grid2D,
    trajs: &[&ScanTrajectory],
) -> Array2<bool> {
    let n = pattern_grid.side_px;
    let m = object_grid.side_px;
    let off = (n - m) as i64 / 2;
    let inset = 3i64;
    let mut mask = Array2::from_elem((n, n), false);
    for traj in trajs {
        for s in &traj.shifts {
            let y0 = (off - s.y.round() as i64 + inset).max(0) as usize;
            let x0 = (off - s.x.round() as i64 + inset).max(0) as usize;
            let y1 = ((off - s.y.round() as i64) + m as i64 - inset).min(n as i64) as usize;
            let x1 = ((off - s.x.round() as i64) + m as i64 - inset).min(n as i64) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    mask[(y, x)] = true;
                }
            }
        }
    }
    mask
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

fn max_norm_c(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn check_finite_real(a: &Array2<f64>, what: &str, l: usize, k: usize) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite {what} after acquisition {l} in iteration {k}"
        )));
    }
    Ok(())
}

fn check_finite_complex(a: &Array2<Complex64>, what: &str, l: usize, k: usize) -> Result<()> {
    if a.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite {what} after acquisition {l} in iteration {k}"
        )));
    }
    Ok(())
}

/// Regularized transfer-update scale `|xi| / (const . max|xi| (|xi|^2 + delta))`
/// applied to the gradient times M^2 (the gradient convention here carries a
/// 1/M^2 from the normalized inverse FFT; the step is defined against the
/// unnormalized form so that it stays scale-invariant).
fn apply_transfer_update(
    transfer: &mut Array2<Complex64>,
    grad: &Array2<Complex64>,
    xi: &Array2<Complex64>,
    mask: &Array2<bool>,
    step_const: f64,
    reg_rel: f64,
) -> f64 {
    let m2 = (transfer.nrows() * transfer.ncols()) as f64;
    let xi_max = max_norm_c(xi);
    if xi_max == 0.0 {
        return 0.0;
    }
    let delta = reg_rel * xi_max * xi_max;
    let mut step_sq = 0.0;
    for ((idx, t), (g, x)) in transfer.indexed_iter_mut().zip(grad.iter().zip(xi.iter())) {
        if !mask[idx] {
            continue;
        }
        let a = x.norm();
        let scale = a / (step_const * xi_max * (a * a + delta));
        let delta_t = g * (m2 * scale);
        *t -= delta_t;
        step_sq += delta_t.norm_sqr();
    }
    step_sq.sqrt()
}

const POSITION_BACKTRACKS: usize = 5;

/// Reconstruct fluorophore density, speckle pattern, OTF and trajectory from
/// a stack of speckle-illuminated images.
pub fn solve_fluorescence(
    stack: &[RealImage],
    traj0: &ScanTrajectory,
    pattern_grid: Grid2D,
    cfg: &SolverConfig,
    optics: &OpticalConfig,
    init: FluorInit,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    optics.validate()?;
    if stack.is_empty() {
        return Err(Error::Input("fluorescence stack is empty".into()));
    }
    let object_grid = stack[0].grid;
    if stack.iter().any(|f| f.grid != object_grid) {
        return Err(Error::Dimension("all stack frames must share one grid".into()));
    }
    if traj0.len() != stack.len() {
        return Err(Error::Config(format!(
            "trajectory has {} entries for {} frames",
            traj0.len(),
            stack.len()
        )));
    }
    traj0.check_within(&pattern_grid, &object_grid)?;

    let m = object_grid.side_px;
    let n = pattern_grid.side_px;

    let mut object = match init.object {
        Some(o) => {
            if o.grid != object_grid {
                return Err(Error::Dimension("initial object grid mismatch".into()));
            }
            o.values
        }
        None => {
            let mut mean = Array2::zeros((m, m));
            for frame in stack {
                mean += &frame.values;
            }
            mean / stack.len() as f64
        }
    };
    let mut pattern = match init.pattern {
        Some(SpecklePattern::RealIntensity { grid, values }) => {
            if grid != pattern_grid {
                return Err(Error::Dimension("initial pattern grid mismatch".into()));
            }
            values
        }
        Some(SpecklePattern::ComplexField { .. }) => {
            return Err(Error::Input("fluorescence channel needs a real intensity pattern".into()))
        }
        None => Array2::ones((n, n)),
    };
    let mut otf = match init.otf {
        Some(t) => {
            if t.grid != object_grid {
                return Err(Error::Dimension("initial OTF grid mismatch".into()));
            }
            t.values
        }
        None => make_incoherent_otf(optics, object_grid)?.values,
    };

    let mask = support_mask(&otf);
    let p_mask = pattern_update_mask(pattern_grid, object_grid, &[traj0]);
    let step_const = cfg.transfer_step_const.unwrap_or(12.0);
    let mut traj = traj0.clone();

    let mut object_prev = object.clone();
    let mut pattern_prev = pattern.clone();
    let mut t_k = 1.0;
    let mut cost_history = Vec::with_capacity(cfg.max_iters);
    let mut trace = Vec::with_capacity(cfg.max_iters);

    for k in 1..=cfg.max_iters {
        let mut iter_cost = 0.0;
        let mut object_step = 0.0f64;
        let mut pattern_step = 0.0f64;
        let mut transfer_step = 0.0f64;
        let traj_before = traj.clone();

        for l in 0..stack.len() {
            let p_now = SpecklePattern::RealIntensity { grid: pattern_grid, values: pattern.clone() };
            let o_now = RealImage { grid: object_grid, values: object.clone() };
            let t_now = TransferFunction {
                grid: object_grid,
                kind: TransferKind::IncoherentOtf,
                values: otf.clone(),
            };
            let g = grad_fluor(&o_now, &p_now, &t_now, traj.shifts[l], &stack[l])?;
            iter_cost += g.cost;

            let max_p = max_abs(&pattern).max(1e-12);
            let max_o = max_abs(&object).max(1e-12);

            if cfg.update_mask.object {
                let step = cfg.object_step_scale / (max_p * max_p);
                let mut sq = 0.0;
                for (o, go) in object.iter_mut().zip(g.d_object.iter()) {
                    let d = step * go;
                    *o -= d;
                    sq += d * d;
                    if cfg.clip_nonnegative && *o < 0.0 {
                        *o = 0.0;
                    }
                }
                object_step += sq.sqrt();
                check_finite_real(&object, "object", l, k)?;
            }
            if cfg.update_mask.pattern {
                let step = cfg.pattern_step_scale / (max_o * max_o);
                let mut sq = 0.0;
                for ((p, gp), &m) in
                    pattern.iter_mut().zip(g.d_pattern.iter()).zip(p_mask.iter())
                {
                    if !m {
                        continue;
                    }
                    let d = step * gp;
                    *p -= d;
                    sq += d * d;
                    if cfg.clip_nonnegative && *p < 0.0 {
                        *p = 0.0;
                    }
                }
                pattern_step += sq.sqrt();
                check_finite_real(&pattern, "pattern", l, k)?;
            }
            if cfg.update_mask.transfer {
                transfer_step += apply_transfer_update(
                    &mut otf,
                    &g.d_otf,
                    &g.xi,
                    &mask,
                    step_const,
                    cfg.otf_reg,
                );
                check_finite_complex(&otf, "OTF", l, k)?;
            }
            if cfg.update_mask.trajectory && k > cfg.trajectory_warmup_iters && g.d_position.norm() > 0.0 {
                let o_now = RealImage { grid: object_grid, values: object.clone() };
                let p_now =
                    SpecklePattern::RealIntensity { grid: pattern_grid, values: pattern.clone() };
                let t_now = TransferFunction {
                    grid: object_grid,
                    kind: TransferKind::IncoherentOtf,
                    values: otf.clone(),
                };
                let eval = |s: Shift2| cost_fluor(&stack[l], &o_now, &p_now, &t_now, s);
                let base = eval(traj.shifts[l])?;
                let mut alpha = cfg.pos_step_fluor;
                for _ in 0..POSITION_BACKTRACKS {
                    let cand = Shift2::new(
                        traj.shifts[l].x - alpha * g.d_position.x,
                        traj.shifts[l].y - alpha * g.d_position.y,
                    );
                    let within = ScanTrajectory::new(vec![cand])
                        .check_within(&pattern_grid, &object_grid)
                        .is_ok();
                    if within && eval(cand)? <= base {
                        traj.shifts[l] = cand;
                        break;
                    }
                    alpha *= 0.5;
                }
            }
        }

        // Nesterov extrapolation on object and pattern at iteration
        // granularity; k = 1 copies without momentum.
        let t_next = nesterov_next_t(t_k);
        if cfg.use_acceleration {
            let coeff = (t_k - 1.0) / t_next;
            let mut o_extrap = object.clone();
            o_extrap.zip_mut_with(&object_prev, |x, &xp| *x += coeff * (*x - xp));
            let mut p_extrap = pattern.clone();
            p_extrap.zip_mut_with(&pattern_prev, |x, &xp| *x += coeff * (*x - xp));
            if cfg.clip_nonnegative {
                o_extrap.mapv_inplace(|v| v.max(0.0));
                p_extrap.mapv_inplace(|v| v.max(0.0));
            }
            object_prev = object;
            pattern_prev = pattern;
            object = o_extrap;
            pattern = p_extrap;
        } else {
            object_prev = object.clone();
            pattern_prev = pattern.clone();
        }
        let momentum = t_k;
        t_k = t_next;

        cost_history.push(iter_cost);
        trace.push(IterationTrace {
            iter: k,
            cost: iter_cost,
            object_step_norm: object_step,
            pattern_step_norm: pattern_step,
            transfer_step_norm: transfer_step,
            trajectory_rms_change: traj.rms_distance(&traj_before),
            momentum_t: momentum,
        });

        if let Some(tol) = cfg.cost_tol {
            if cost_history.len() >= 2 {
                let prev = cost_history[cost_history.len() - 2];
                if prev > 0.0 && ((prev - iter_cost) / prev).abs() < tol {
                    break;
                }
            }
        }
    }

    Ok(ReconstructionResult {
        object: ObjectEstimate::Fluorescence(RealImage { grid: object_grid, values: object }),
        pattern: SpecklePattern::RealIntensity { grid: pattern_grid, values: pattern },
        transfer: TransferFunction {
            grid: object_grid,
            kind: TransferKind::IncoherentOtf,
            values: otf,
        },
        trajectories: vec![traj],
        cost_history,
        trace,
    })
}

/// Default coherent pattern initialization: average of the in-focus
/// amplitudes, each shifted back to the pattern frame.
fn init_coherent_pattern(
    in_focus: &[RealImage],
    traj: &ScanTrajectory,
    pattern_grid: Grid2D,
) -> Result<Array2<Complex64>> {
    let n = pattern_grid.side_px;
    let mut acc: Array2<Complex64> = Array2::zeros((n, n));
    let mut weight: Array2<Complex64> = Array2::zeros((n, n));
    for (frame, &shift) in in_focus.iter().zip(&traj.shifts) {
        let amp = frame.values.mapv(|v| Complex64::new(v.max(0.0).sqrt(), 0.0));
        let ones = Array2::from_elem(amp.dim(), Complex64::new(1.0, 0.0));
        let back = Shift2::new(-shift.x, -shift.y);
        acc += &subpixel_shift_complex(&pad(&amp, n)?, pattern_grid, back)?;
        weight += &subpixel_shift_complex(&pad(&ones, n)?, pattern_grid, back)?;
    }
    // weight-normalized mean amplitude over the covered region; used to fill
    // pixels the scan never reaches so they stay at a representative scale
    let mut amp_sum = 0.0;
    let mut amp_count = 0usize;
    for (a, w) in acc.iter().zip(weight.iter()) {
        if w.re > 0.25 {
            amp_sum += (a / w.re).norm();
            amp_count += 1;
        }
    }
    let mean_amp = if amp_count > 0 { amp_sum / amp_count as f64 } else { 1.0 };
    Ok(Array2::from_shape_fn((n, n), |idx| {
        let w = weight[idx].re;
        if w > 0.25 {
            acc[idx] / w
        } else {
            Complex64::new(mean_amp.max(1e-6), 0.0)
        }
    }))
}

/// Reconstruct complex transmittance, speckle field, pupil and per-plane
/// trajectories from defocused intensity stacks (`stacks[z][l]`).
pub fn solve_coherent(
    stacks: &[Vec<RealImage>],
    traj0: &[ScanTrajectory],
    pattern_grid: Grid2D,
    cfg: &SolverConfig,
    optics: &OpticalConfig,
    init: CohInit,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    optics.validate()?;
    let n_z = stacks.len();
    if n_z == 0 || stacks[0].is_empty() {
        return Err(Error::Input("coherent stacks are empty".into()));
    }
    if optics.defocus_planes.len() != n_z {
        return Err(Error::Config(format!(
            "{} defocus planes configured for {} stacks",
            optics.defocus_planes.len(),
            n_z
        )));
    }
    if traj0.len() != n_z {
        return Err(Error::Config("need one initial trajectory per plane".into()));
    }
    let n_img = stacks[0].len();
    let object_grid = stacks[0][0].grid;
    for (z, stack) in stacks.iter().enumerate() {
        if stack.len() != n_img {
            return Err(Error::Dimension("all planes must have the same frame count".into()));
        }
        if stack.iter().any(|f| f.grid != object_grid) {
            return Err(Error::Dimension("all frames must share one grid".into()));
        }
        traj0[z].check_within(&pattern_grid, &object_grid)?;
        if traj0[z].len() != n_img {
            return Err(Error::Config(format!("trajectory {z} length mismatch")));
        }
    }

    let m = object_grid.side_px;
    let mut object = match init.object {
        Some(o) => {
            if o.grid != object_grid {
                return Err(Error::Dimension("initial object grid mismatch".into()));
            }
            o.values
        }
        None => Array2::from_elem((m, m), Complex64::new(1.0, 0.0)),
    };
    // in-focus plane = smallest |z|
    let focus_z = optics
        .defocus_planes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();
    let mut pattern = match init.pattern {
        Some(SpecklePattern::ComplexField { grid, values }) => {
            if grid != pattern_grid {
                return Err(Error::Dimension("initial pattern grid mismatch".into()));
            }
            values
        }
        Some(SpecklePattern::RealIntensity { .. }) => {
            return Err(Error::Input("coherent channel needs a complex field pattern".into()))
        }
        None => init_coherent_pattern(&stacks[focus_z], &traj0[focus_z], pattern_grid)?,
    };
    let mut pupil = match init.pupil {
        Some(t) => {
            if t.grid != object_grid {
                return Err(Error::Dimension("initial pupil grid mismatch".into()));
            }
            t.values
        }
        None => make_pupil(optics, object_grid, &[])?.values,
    };
    let defocus: Vec<TransferFunction> = optics
        .defocus_planes
        .iter()
        .map(|&z| crate::ops::make_defocus_factor(optics, z, object_grid))
        .collect::<Result<_>>()?;

    let mask = support_mask(&pupil);
    let p_mask = pattern_update_mask(pattern_grid, object_grid, &traj0.iter().collect::<Vec<_>>());
    let step_const = cfg.transfer_step_const.unwrap_or(5.0);
    let mut trajs: Vec<ScanTrajectory> = traj0.to_vec();

    let mut cost_history = Vec::with_capacity(cfg.max_iters);
    let mut trace = Vec::with_capacity(cfg.max_iters);

    for k in 1..=cfg.max_iters {
        let mut iter_cost = 0.0;
        let mut object_step = 0.0f64;
        let mut pattern_step = 0.0f64;
        let mut transfer_step = 0.0f64;
        let trajs_before = trajs.clone();

        for t in 1..=n_img * n_z {
            let l = (t - 1) % n_img;
            let z = (t - 1) % n_z;

            let o_now = ComplexField { grid: object_grid, values: object.clone() };
            let p_now =
                SpecklePattern::ComplexField { grid: pattern_grid, values: pattern.clone() };
            let pupil_now = TransferFunction {
                grid: object_grid,
                kind: TransferKind::CoherentPupil,
                values: pupil.clone(),
            };
            let g = grad_coherent(
                &o_now,
                &p_now,
                &pupil_now,
                &defocus[z],
                trajs[z].shifts[l],
                &stacks[z][l],
            )?;
            iter_cost += g.cost;

            let max_p = max_norm_c(&pattern).max(1e-12);
            let max_o = max_norm_c(&object).max(1e-12);

            if cfg.update_mask.object {
                let step = cfg.object_step_scale / (max_p * max_p);
                let mut sq = 0.0;
                for (o, go) in object.iter_mut().zip(g.d_object.iter()) {
                    let d = go * step;
                    *o -= d;
                    sq += d.norm_sqr();
                }
                object_step += sq.sqrt();
                check_finite_complex(&object, "object", l, k)?;
            }
            if cfg.update_mask.pattern {
                let step = cfg.pattern_step_scale / (max_o * max_o);
                let mut sq = 0.0;
                for ((p, gp), &m) in
                    pattern.iter_mut().zip(g.d_pattern.iter()).zip(p_mask.iter())
                {
                    if !m {
                        continue;
                    }
                    let d = gp * step;
                    *p -= d;
                    sq += d.norm_sqr();
                }
                pattern_step += sq.sqrt();
                check_finite_complex(&pattern, "pattern", l, k)?;
            }
            if cfg.update_mask.transfer {
                transfer_step += apply_transfer_update(
                    &mut pupil,
                    &g.d_pupil,
                    &g.xi,
                    &mask,
                    step_const,
                    cfg.otf_reg,
                );
                check_finite_complex(&pupil, "pupil", l, k)?;
            }
            if cfg.update_mask.trajectory && k > cfg.trajectory_warmup_iters && g.d_position.norm() > 0.0 {
                let o_now = ComplexField { grid: object_grid, values: object.clone() };
                let p_now =
                    SpecklePattern::ComplexField { grid: pattern_grid, values: pattern.clone() };
                let pupil_now = TransferFunction {
                    grid: object_grid,
                    kind: TransferKind::CoherentPupil,
                    values: pupil.clone(),
                };
                let eval = |s: Shift2| {
                    cost_coherent(&stacks[z][l], &o_now, &p_now, &pupil_now, &defocus[z], s)
                };
                let base = eval(trajs[z].shifts[l])?;
                let mut beta = cfg.pos_step_coh;
                for _ in 0..POSITION_BACKTRACKS {
                    let cand = Shift2::new(
                        trajs[z].shifts[l].x - beta * g.d_position.x,
                        trajs[z].shifts[l].y - beta * g.d_position.y,
                    );
                    let within = ScanTrajectory::new(vec![cand])
                        .check_within(&pattern_grid, &object_grid)
                        .is_ok();
                    if within && eval(cand)? <= base {
                        trajs[z].shifts[l] = cand;
                        break;
                    }
                    beta *= 0.5;
                }
            }
        }

        let traj_change = trajs
            .iter()
            .zip(&trajs_before)
            .map(|(a, b)| a.rms_distance(b).powi(2))
            .sum::<f64>()
            .sqrt()
            / (n_z as f64).sqrt();

        cost_history.push(iter_cost);
        trace.push(IterationTrace {
            iter: k,
            cost: iter_cost,
            object_step_norm: object_step,
            pattern_step_norm: pattern_step,
            transfer_step_norm: transfer_step,
            trajectory_rms_change: traj_change,
            momentum_t: 1.0,
        });

        if let Some(tol) = cfg.cost_tol {
            if cost_history.len() >= 2 {
                let prev = cost_history[cost_history.len() - 2];
                if prev > 0.0 && ((prev - iter_cost) / prev).abs() < tol {
                    break;
                }
            }
        }
    }

    Ok(ReconstructionResult {
        object: ObjectEstimate::Coherent(ComplexField { grid: object_grid, values: object }),
        pattern: SpecklePattern::ComplexField { grid: pattern_grid, values: pattern },
        transfer: TransferFunction {
            grid: object_grid,
            kind: TransferKind::CoherentPupil,
            values: pupil,
        },
        trajectories: trajs,
        cost_history,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesterov_sequence_matches_closed_form() {
        let t2 = nesterov_next_t(1.0);
        assert!((t2 - (1.0 + 5.0_f64.sqrt()) / 2.0).abs() < 1e-12);
        let t3 = nesterov_next_t(t2);
        assert!((t3 - 2.1935).abs() < 5e-5);
        // momentum coefficient at k=2
        assert!(((t2 - 1.0) / t3 - 0.2818).abs() < 5e-5);
    }

    #[test]
    fn nesterov_update_identity_and_first_step() {
        let x = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        // x == x_prev leaves x unchanged
        let same = nesterov_update(&x, &x, 2.0);
        assert!(same.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        // t_k = 1 copies without extrapolation
        let prev = x.mapv(|v| v - 1.0);
        let first = nesterov_update(&x, &prev, 1.0);
        assert!(first.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn support_mask_dilates_by_one_bin() {
        let mut t: Array2<Complex64> = Array2::zeros((6, 6));
        t[(2, 2)] = Complex64::new(1.0, 0.0);
        let m = support_mask(&t);
        assert!(m[(2, 2)] && m[(1, 2)] && m[(3, 3)] && m[(2, 1)]);
        assert!(!m[(0, 0)] && !m[(5, 5)] && !m[(2, 4)]);
        // wrap-around dilation
        let mut edge: Array2<Complex64> = Array2::zeros((6, 6));
        edge[(0, 0)] = Complex64::new(1.0, 0.0);
        let me = support_mask(&edge);
        assert!(me[(5, 0)] && me[(0, 5)] && me[(5, 5)]);
    }
}
