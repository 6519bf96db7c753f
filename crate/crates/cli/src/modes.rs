//! One function per CLI mode. Every mode returns the list of artifact file
//! names it wrote (relative to the output directory) so the run manifest can
//! record them.

use std::fs;
use std::path::Path;

use speckle_sim::fdcheck::fd_suite;
use speckle_sim::fft::fft2_real;
use speckle_sim::ops::{register_subpixel, subpixel_shift};
use speckle_sim::sim::{
    gen_phantom, gen_speckle, simulate_coherent_stacks, simulate_fluor_stack, Phantom,
    SpeckleMode,
};
use speckle_sim::solver::{
    estimate_trajectory, solve_coherent, solve_fluorescence, CohInit, FluorInit,
};
use speckle_sim::stitch::{blend_real, partition_stack};
use speckle_sim::types::{
    Grid2D, ObjectEstimate, RealImage, ScanTrajectory, Shift2, SpecklePattern,
};

use crate::artifacts::{
    save_png, save_spectrum_png, write_cost_csv, write_trajectory_pair_csv,
};
use crate::config::{Channel, JobConfig};
use crate::error::{AppError, AppResult};
use crate::stack_io::{
    read_stack, read_trajectory_csv, write_complex_raw, write_real_raw, write_stack,
    write_trajectory_csv, StackManifest, FORMAT_VERSION,
};

fn push(artifacts: &mut Vec<String>, name: &str) {
    artifacts.push(name.to_string());
}

/// Simulate an acquisition series and write it (plus ground-truth sidecars)
/// to `<out>/stack`.
pub fn simulate(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    let optics = cfg.require_optics()?;
    let grids = cfg.require_grids()?;
    let plan = cfg.require_acquisition()?;
    let spec = cfg.require_phantom()?;
    let gm = grids.object_grid()?;
    let gn = grids.pattern_grid()?;
    let phantom = gen_phantom(spec, gm)?;
    let (p_c, p_f) = gen_speckle(optics, gn, cfg.seed)?;
    let stack_dir = out.join("stack");
    fs::create_dir_all(&stack_dir)?;
    let mut artifacts = Vec::new();

    match phantom {
        Phantom::Fluorescence(obj) => {
            if cfg.channel == Some(Channel::Coherent) {
                return Err(AppError::Config(
                    "phantom is fluorescent but channel = coherent".into(),
                ));
            }
            let mode = cfg.speckle_mode.unwrap_or(SpeckleMode::Translating);
            let sim = simulate_fluor_stack(&obj, &p_f, plan, optics, mode, cfg.seed + 1)?;
            let manifest = StackManifest {
                format_version: FORMAT_VERSION,
                channel: "fluorescence".into(),
                grid_px: gm.side_px,
                pixel_size_um: gm.pixel_size,
                optics: optics.clone(),
                plan: plan.clone(),
                n_planes: 1,
                n_frames: sim.stack.len(),
                endianness: "little".into(),
            };
            write_stack(&stack_dir, &manifest, std::slice::from_ref(&sim.stack))?;
            write_trajectory_csv(&stack_dir.join("trajectory.csv"), &sim.trajectory)?;
            write_real_raw(&stack_dir.join("truth_object.raw"), &obj.values)?;
            if let SpecklePattern::RealIntensity { values, .. } = &p_f {
                write_real_raw(&stack_dir.join("truth_pattern.raw"), values)?;
            }
        }
        Phantom::Coherent(obj) => {
            if cfg.channel == Some(Channel::Fluorescence) {
                return Err(AppError::Config(
                    "phantom is coherent but channel = fluorescence".into(),
                ));
            }
            let sim = simulate_coherent_stacks(
                &obj,
                &p_c,
                plan,
                optics,
                &cfg.aberrations,
                cfg.seed + 1,
            )?;
            let manifest = StackManifest {
                format_version: FORMAT_VERSION,
                channel: "coherent".into(),
                grid_px: gm.side_px,
                pixel_size_um: gm.pixel_size,
                optics: optics.clone(),
                plan: plan.clone(),
                n_planes: sim.stacks.len(),
                n_frames: sim.stacks[0].len(),
                endianness: "little".into(),
            };
            write_stack(&stack_dir, &manifest, &sim.stacks)?;
            write_trajectory_csv(&stack_dir.join("trajectory.csv"), &sim.trajectories[0])?;
            write_complex_raw(&stack_dir.join("truth_object.raw"), &obj.values)?;
            if let SpecklePattern::ComplexField { values, .. } = &p_c {
                write_complex_raw(&stack_dir.join("truth_pattern.raw"), values)?;
            }
        }
    }
    push(&mut artifacts, "stack");
    Ok(artifacts)
}

/// Initial trajectory for a reconstruction: the simulator sidecar when
/// present, otherwise frame-to-frame registration of the raw stack.
fn initial_trajectory(stack_dir: &Path, stack: &[RealImage]) -> AppResult<ScanTrajectory> {
    let sidecar = stack_dir.join("trajectory.csv");
    if sidecar.exists() {
        read_trajectory_csv(&sidecar)
    } else {
        Ok(estimate_trajectory(stack)?)
    }
}

pub fn reconstruct_fluor(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    let input = cfg.require_input()?;
    let (manifest, planes) = read_stack(input)?;
    if manifest.channel != "fluorescence" {
        return Err(AppError::Config(format!(
            "reconstruct-fluor needs a fluorescence stack, found {}",
            manifest.channel
        )));
    }
    let stack = &planes[0];
    let pattern_px =
        cfg.grids.map(|g| g.pattern_px).unwrap_or(2 * manifest.grid_px);
    let gn = Grid2D::new(pattern_px, manifest.pixel_size_um)?;
    let init_traj = initial_trajectory(input, stack)?;
    let res = solve_fluorescence(
        stack,
        &init_traj,
        gn,
        &cfg.solver,
        &manifest.optics,
        FluorInit::default(),
    )?;
    let ObjectEstimate::Fluorescence(rec) = &res.object else {
        return Err(AppError::Invariant("fluorescence solve returned a complex object".into()));
    };

    let mut artifacts = Vec::new();
    write_real_raw(&out.join("object.raw"), &rec.values)?;
    push(&mut artifacts, "object.raw");
    save_png(&out.join("object.png"), &rec.values)?;
    push(&mut artifacts, "object.png");
    save_spectrum_png(&out.join("object_spectrum.png"), &rec.values)?;
    push(&mut artifacts, "object_spectrum.png");
    if let SpecklePattern::RealIntensity { values, .. } = &res.pattern {
        write_real_raw(&out.join("pattern.raw"), values)?;
        push(&mut artifacts, "pattern.raw");
        save_png(&out.join("pattern.png"), values)?;
        push(&mut artifacts, "pattern.png");
    }
    write_cost_csv(&out.join("cost_history.csv"), &res.cost_history)?;
    push(&mut artifacts, "cost_history.csv");
    write_trajectory_pair_csv(&out.join("trajectory.csv"), &init_traj, &res.trajectories[0])?;
    push(&mut artifacts, "trajectory.csv");
    Ok(artifacts)
}

pub fn reconstruct_phase(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    let input = cfg.require_input()?;
    let (manifest, planes) = read_stack(input)?;
    if manifest.channel != "coherent" {
        return Err(AppError::Config(format!(
            "reconstruct-phase needs a coherent stack, found {}",
            manifest.channel
        )));
    }
    let pattern_px =
        cfg.grids.map(|g| g.pattern_px).unwrap_or(2 * manifest.grid_px);
    let gn = Grid2D::new(pattern_px, manifest.pixel_size_um)?;
    let init_traj = initial_trajectory(input, &planes[0])?;
    let trajectories = vec![init_traj.clone(); planes.len()];
    let res = solve_coherent(
        &planes,
        &trajectories,
        gn,
        &cfg.solver,
        &manifest.optics,
        CohInit::default(),
    )?;
    let ObjectEstimate::Coherent(rec) = &res.object else {
        return Err(AppError::Invariant("coherent solve returned a real object".into()));
    };

    let mut artifacts = Vec::new();
    write_complex_raw(&out.join("object.raw"), &rec.values)?;
    push(&mut artifacts, "object.raw");
    save_png(&out.join("amplitude.png"), &rec.values.mapv(|v| v.norm()))?;
    push(&mut artifacts, "amplitude.png");
    save_png(&out.join("phase.png"), &rec.values.mapv(|v| v.arg()))?;
    push(&mut artifacts, "phase.png");
    save_png(&out.join("pupil_phase.png"), &res.transfer.values.mapv(|v| v.arg()))?;
    push(&mut artifacts, "pupil_phase.png");
    if let SpecklePattern::ComplexField { values, .. } = &res.pattern {
        write_complex_raw(&out.join("pattern.raw"), values)?;
        push(&mut artifacts, "pattern.raw");
    }
    write_cost_csv(&out.join("cost_history.csv"), &res.cost_history)?;
    push(&mut artifacts, "cost_history.csv");
    for (z, refined) in res.trajectories.iter().enumerate() {
        let name = format!("trajectory_z{z:02}.csv");
        write_trajectory_pair_csv(&out.join(&name), &init_traj, refined)?;
        push(&mut artifacts, &name);
    }
    Ok(artifacts)
}

pub fn register(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    let input = cfg.require_input()?;
    let (_, planes) = read_stack(input)?;
    let traj = estimate_trajectory(&planes[0])?;
    write_trajectory_csv(&out.join("trajectory.csv"), &traj)?;
    Ok(vec!["trajectory.csv".into()])
}

pub fn check_gradients(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    const TOL: f64 = 1e-5;
    let mut w = csv::Writer::from_path(out.join("gradient_report.csv"))?;
    w.write_record(["seed", "block", "max_rel_err"])?;
    let mut worst = 0.0f64;
    for seed in cfg.seed..cfg.seed + 20 {
        for report in fd_suite(8, 16, seed)? {
            worst = worst.max(report.max_rel_err);
            w.write_record([
                seed.to_string(),
                report.block.to_string(),
                format!("{:.3e}", report.max_rel_err),
            ])?;
        }
    }
    w.flush()?;
    if worst >= TOL {
        return Err(AppError::Invariant(format!(
            "finite-difference check failed: max relative error {worst:.3e} >= {TOL:.0e}"
        )));
    }
    Ok(vec!["gradient_report.csv".into()])
}

/// Registered in-band NMSE of a reconstruction against ground truth, split
/// into all-band and beyond-2x-native-cutoff figures.
fn nmse_split(
    truth: &RealImage,
    rec: &RealImage,
    native_cutoff: f64,
) -> AppResult<(f64, f64)> {
    let reg = register_subpixel(truth, rec)?;
    let rec_pat = SpecklePattern::real(rec.grid, rec.values.clone())?;
    let SpecklePattern::RealIntensity { values: aligned, .. } =
        subpixel_shift(&rec_pat, Shift2::new(-reg.x, -reg.y))?
    else {
        return Err(AppError::Invariant("subpixel shift changed the pattern kind".into()));
    };
    let da = fft2_real(&aligned)?;
    let dt = fft2_real(&truth.values)?;
    let (mut num_all, mut den_all, mut num_high, mut den_high) = (0.0, 0.0, 0.0, 0.0);
    for ((qy, qx), vt) in dt.indexed_iter() {
        let f = truth.grid.freq(qx).hypot(truth.grid.freq(qy));
        let d = (da[(qy, qx)] - vt).norm_sqr();
        num_all += d;
        den_all += vt.norm_sqr();
        if f > 2.0 * native_cutoff {
            num_high += d;
            den_high += vt.norm_sqr();
        }
    }
    Ok((num_all / den_all, num_high / den_high.max(1e-300)))
}

/// Matched-budget comparison of translating vs independent-per-frame
/// speckle; writes `posedness_report.csv` plus `posedness_summary.json`.
pub fn posedness_bench(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    let optics = cfg.require_optics()?;
    let grids = cfg.require_grids()?;
    let plan = cfg.require_acquisition()?;
    let spec = cfg.require_phantom()?;
    let gm = grids.object_grid()?;
    let gn = grids.pattern_grid()?;
    let Phantom::Fluorescence(obj) = gen_phantom(spec, gm)? else {
        return Err(AppError::Config("posedness-bench needs a fluorescence phantom".into()));
    };
    let native_cutoff = 2.0 * optics.na_sys / optics.lambda_em;

    let mut w = csv::Writer::from_path(out.join("posedness_report.csv"))?;
    w.write_record([
        "seed",
        "nmse_translating_all",
        "nmse_translating_high",
        "nmse_independent_all",
        "nmse_independent_high",
        "translating_better_high",
    ])?;
    let mut all_better = true;
    for k in 0..5u64 {
        let seed = cfg.seed + 100 * (k + 1);
        let (_, p_f) = gen_speckle(optics, gn, seed)?;
        let mut nmse = [(0.0, 0.0); 2];
        for (i, mode) in [SpeckleMode::Translating, SpeckleMode::IndependentPerFrame]
            .into_iter()
            .enumerate()
        {
            let sim = simulate_fluor_stack(&obj, &p_f, plan, optics, mode, seed + 1)?;
            let traj = match mode {
                SpeckleMode::Translating => sim.trajectory.clone(),
                // per-frame random speckle carries no usable shift
                // structure; reconstruct under the shared-pattern model
                SpeckleMode::IndependentPerFrame => {
                    ScanTrajectory::new(vec![Shift2::default(); sim.stack.len()])
                }
            };
            let mut solver = cfg.solver.clone();
            solver.update_mask.trajectory = false;
            solver.update_mask.transfer = false;
            let res = solve_fluorescence(
                &sim.stack,
                &traj,
                gn,
                &solver,
                optics,
                FluorInit::default(),
            )?;
            let ObjectEstimate::Fluorescence(rec) = &res.object else {
                return Err(AppError::Invariant("unexpected object kind".into()));
            };
            nmse[i] = nmse_split(&obj, rec, native_cutoff)?;
        }
        let better = nmse[0].1 < nmse[1].1;
        all_better &= better;
        w.write_record([
            seed.to_string(),
            format!("{:.6e}", nmse[0].0),
            format!("{:.6e}", nmse[0].1),
            format!("{:.6e}", nmse[1].0),
            format!("{:.6e}", nmse[1].1),
            better.to_string(),
        ])?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "resolution_gain_bound": optics.resolution_gain(),
        "native_cutoff_cyc_per_um": native_cutoff,
        "translating_better_high_all_seeds": all_better,
    });
    fs::write(out.join("posedness_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(vec!["posedness_report.csv".into(), "posedness_summary.json".into()])
}

/// Patch-wise reconstruction of a large field: partition the stack, solve
/// each patch independently (optionally in parallel) and feather-blend.
pub fn stitch(cfg: &JobConfig, out: &Path) -> AppResult<Vec<String>> {
    let input = cfg.require_input()?;
    let layout = *cfg.require_stitch()?;
    let (manifest, planes) = read_stack(input)?;
    if manifest.channel != "fluorescence" {
        return Err(AppError::Config("stitch mode currently expects a fluorescence stack".into()));
    }
    let stack = &planes[0];
    let psf_radius_px =
        0.61 * manifest.optics.lambda_em / manifest.optics.na_sys / manifest.pixel_size_um;
    layout.check_psf(psf_radius_px)?;
    let patch_stacks = partition_stack(stack, &layout)?;
    let init_traj = initial_trajectory(input, stack)?;
    let gn = Grid2D::new(2 * layout.patch_px, manifest.pixel_size_um)?;
    let mut solver = cfg.solver.clone();
    solver.update_mask.trajectory = false;

    let n_threads = match cfg.threads {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(patch_stacks.len())
    .max(1);

    let mut patches: Vec<Option<RealImage>> = vec![None; patch_stacks.len()];
    let chunk = patch_stacks.len().div_ceil(n_threads);
    std::thread::scope(|scope| -> AppResult<()> {
        let mut handles = Vec::new();
        for (t, slot_chunk) in patches.chunks_mut(chunk).enumerate() {
            let start = t * chunk;
            let patch_stacks = &patch_stacks;
            let init_traj = &init_traj;
            let solver = &solver;
            let optics = &manifest.optics;
            handles.push(scope.spawn(move || -> AppResult<()> {
                for (off, slot) in slot_chunk.iter_mut().enumerate() {
                    let res = solve_fluorescence(
                        &patch_stacks[start + off],
                        init_traj,
                        gn,
                        solver,
                        optics,
                        FluorInit::default(),
                    )?;
                    let ObjectEstimate::Fluorescence(rec) = res.object else {
                        return Err(AppError::Invariant("unexpected object kind".into()));
                    };
                    *slot = Some(rec);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().map_err(|_| AppError::Numerical("patch worker panicked".into()))??;
        }
        Ok(())
    })?;
    let patches: Vec<RealImage> =
        patches.into_iter().map(|p| p.expect("all patches solved")).collect();
    let blended = blend_real(&patches, &layout)?;

    let mut artifacts = Vec::new();
    write_real_raw(&out.join("stitched.raw"), &blended.values)?;
    push(&mut artifacts, "stitched.raw");
    save_png(&out.join("stitched.png"), &blended.values)?;
    push(&mut artifacts, "stitched.png");
    Ok(artifacts)
}
