//! Scratch end-to-end runs used to size the integration-test instances.
//! Run with `cargo run --release --example pilot [fluor|coh|selfcal|posed]`.

use ndarray::Array2;
use speckle_sim::fft::fft2_real;
use speckle_sim::sim::{
    gen_phantom, gen_speckle, simulate_coherent_stacks, simulate_fluor_stack, AcquisitionPlan,
    Phantom, PhantomSpec, SpeckleMode,
};
use speckle_sim::solver::{solve_coherent, solve_fluorescence, CohInit, FluorInit};
use speckle_sim::types::{
    Grid2D, ObjectEstimate, OpticalConfig, ScanTrajectory, Shift2, SolverConfig,
};

fn optics_fluor() -> OpticalConfig {
    OpticalConfig {
        lambda_ex: 0.532,
        lambda_em: 0.605,
        na_sys: 0.1,
        na_illum: 0.3,
        defocus_planes: vec![0.0],
        medium_index: 1.0,
    }
}

fn run_fluor() {
    let t0 = std::time::Instant::now();
    let optics = optics_fluor();
    let gm = Grid2D::new(64, 0.126).unwrap();
    let gn = Grid2D::new(128, 0.126).unwrap();
    let sep = optics.lambda_em / (2.0 * (optics.na_sys + optics.na_illum));
    println!("separation {sep:.4} um = {:.2} px", sep / gm.pixel_size);
    let Phantom::Fluorescence(obj) =
        gen_phantom(&PhantomSpec::TwoPoints { separation_um: sep, amplitude: 1.0 }, gm).unwrap()
    else {
        unreachable!()
    };
    let (_, p_f) = gen_speckle(&optics, gn, 5).unwrap();
    let plan = AcquisitionPlan {
        rows: 11,
        cols: 11,
        step_um: 0.126 * 2.0,
        jitter_rms_px: 0.0,
        photon_budget: None,
        read_noise: 0.0,
    };
    let sim = simulate_fluor_stack(&obj, &p_f, &plan, &optics, SpeckleMode::Translating, 6)
        .unwrap();
    println!("simulated {} frames in {:?}", sim.stack.len(), t0.elapsed());

    let iters: usize = std::env::var("PILOT_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(100);
    let mut cfg = SolverConfig { max_iters: iters, ..Default::default() };
    cfg.update_mask.trajectory = std::env::var("PILOT_TRAJ").is_ok();
    cfg.update_mask.transfer = std::env::var("PILOT_TRANSFER").is_ok();
    let res = solve_fluorescence(
        &sim.stack,
        &sim.trajectory,
        gn,
        &cfg,
        &optics,
        FluorInit::default(),
    )
    .unwrap();
    println!("solve took {:?}", t0.elapsed());
    println!(
        "cost: initial {:.3e} -> k10 {:.3e} -> final {:.3e} (ratio {:.4})",
        res.cost_history[0],
        res.cost_history[9],
        res.cost_history.last().unwrap(),
        res.cost_history.last().unwrap() / res.cost_history[0]
    );

    let ObjectEstimate::Fluorescence(rec) = &res.object else { unreachable!() };
    // dip analysis along the center row
    let row = 32usize;
    let sep_px = (sep / gm.pixel_size).round() as usize;
    let x0 = 32 - sep_px / 2;
    let x1 = x0 + sep_px;
    let mid = (x0 + x1) / 2;
    let widefield = {
        let mut mean = Array2::<f64>::zeros((64, 64));
        for f in &sim.stack {
            mean += &f.values;
        }
        mean / sim.stack.len() as f64
    };
    let dip = |img: &Array2<f64>| {
        let peak = img[(row, x0)].max(img[(row, x1)]);
        let valley = img[(row, mid)];
        (peak - valley) / peak
    };
    println!("widefield dip {:.4}, recon dip {:.4}", dip(&widefield), dip(&rec.values));
    let prof: Vec<f64> = (24..42).map(|x| rec.values[(row, x)]).collect();
    println!("rec row profile x=24..42: {:?}", prof.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    let col_max: Vec<f64> = (24..42).map(|x| (0..64).map(|y| rec.values[(y, x)]).fold(0.0, f64::max)).collect();
    println!("rec col max x=24..42: {:?}", col_max.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    println!("x0={x0} mid={mid} x1={x1}");
    println!("peaks wf {:?} rec {:?}", (widefield[(row, x0)], widefield[(row, mid)], widefield[(row, x1)]), (rec.values[(row, x0)], rec.values[(row, mid)], rec.values[(row, x1)]));

    // Fourier support at -30 dB
    let spec = fft2_real(&rec.values).unwrap();
    let peak = spec.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let native_cutoff = 2.0 * optics.na_sys / optics.lambda_em;
    let mut max_freq = 0.0f64;
    for ((qy, qx), v) in spec.indexed_iter() {
        if v.norm() > peak * 10f64.powf(-30.0 / 20.0) {
            let f = gm.freq(qx).hypot(gm.freq(qy));
            max_freq = max_freq.max(f);
        }
    }
    println!(
        "support at -30 dB: {:.3} cyc/um = {:.2}x native cutoff {:.3}",
        max_freq,
        max_freq / native_cutoff,
        native_cutoff
    );
    println!("total {:?}", t0.elapsed());
}

fn run_coh() {
    let t0 = std::time::Instant::now();
    let optics = OpticalConfig {
        lambda_ex: 0.532,
        lambda_em: 0.605,
        na_sys: 0.2,
        na_illum: std::env::var("PILOT_NAI").ok().and_then(|v| v.parse().ok()).unwrap_or(0.4),
        defocus_planes: vec![0.0, std::env::var("PILOT_Z").ok().and_then(|v| v.parse().ok()).unwrap_or(10.0)],
        medium_index: 1.0,
    };
    let gm = Grid2D::new(64, 0.3).unwrap();
    let gn = Grid2D::new(128, 0.3).unwrap();
    let Phantom::Coherent(obj) = gen_phantom(
        &PhantomSpec::PhaseTarget { bar_width_um: std::env::var("PILOT_BAR").ok().and_then(|v| v.parse().ok()).unwrap_or(2.4), levels_rad: vec![0.0, 1.0, 2.0, 3.0] },
        gm,
    )
    .unwrap() else {
        unreachable!()
    };
    let sd: u64 = std::env::var("PILOT_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let (p_c, _) = gen_speckle(&optics, gn, sd).unwrap();
    let rows: usize = std::env::var("PILOT_ROWS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let step_um: f64 = std::env::var("PILOT_STEP").ok().and_then(|v| v.parse().ok()).unwrap_or(0.6);
    let plan = AcquisitionPlan {
        rows,
        cols: rows,
        step_um,
        jitter_rms_px: std::env::var("PILOT_JITTER").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0),
        photon_budget: None,
        read_noise: 0.0,
    };
    let sim = simulate_coherent_stacks(&obj, &p_c, &plan, &optics, &[], sd + 1).unwrap();
    println!("simulated {}x{} frames in {:?}", sim.stacks.len(), sim.stacks[0].len(), t0.elapsed());

    let iters: usize = std::env::var("PILOT_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let mut cfg = SolverConfig { max_iters: iters, use_acceleration: false, ..Default::default() };
    if let Some(v) = std::env::var("PILOT_OSCALE").ok().and_then(|v| v.parse().ok()) { cfg.object_step_scale = v; }
    cfg.update_mask.trajectory = std::env::var("PILOT_TRAJ").is_ok();
    if let Some(v) = std::env::var("PILOT_PSCALE").ok().and_then(|v| v.parse().ok()) { cfg.pattern_step_scale = v; }
    let mut init = CohInit::default();
    if std::env::var("PILOT_KNOWN_PATTERN").is_ok() {
        cfg.update_mask.pattern = false;
        init.pattern = Some(p_c.clone());
    }
    if std::env::var("PILOT_TRUE_PATTERN_INIT").is_ok() {
        init.pattern = Some(p_c.clone());
    }
    if std::env::var("PILOT_KNOWN_OBJECT").is_ok() {
        cfg.update_mask.object = false;
        init.object = Some(obj.clone());
    }
    if std::env::var("PILOT_NO_PUPIL").is_ok() {
        cfg.update_mask.transfer = false;
    }
    let res = solve_coherent(
        &sim.stacks,
        &sim.trajectories,
        gn,
        &cfg,
        &optics,
        init,
    )
    .unwrap();
    println!("solve took {:?}", t0.elapsed());
    println!(
        "cost: initial {:.3e} -> final {:.3e} (ratio {:.4})",
        res.cost_history[0],
        res.cost_history.last().unwrap(),
        res.cost_history.last().unwrap() / res.cost_history[0]
    );

    let ObjectEstimate::Coherent(rec) = &res.object else { unreachable!() };
    // phase RMS after removing the global phase, interior only (avoid wrap)
    let inner = 8..56usize;
    // phase difference field rec/truth, with the unobservable linear phase
    // ramp (illumination-tilt gauge) and global phase removed before scoring
    let mut diff = Array2::<num_complex::Complex64>::zeros((64, 64));
    // reference = truth band-limited to the SIM passband; energy beyond
    // (NA_sys + NA_illum)/lambda never reaches the data and cannot come back
    let sim_cutoff = (optics.na_sys + optics.na_illum) / optics.lambda_ex;
    let mut tspec = speckle_sim::fft::fft2(&obj.values.mapv(|v| v)).unwrap();
    for ((qy, qx), v) in tspec.indexed_iter_mut() {
        if gm.freq(qx).hypot(gm.freq(qy)) > sim_cutoff {
            *v = num_complex::Complex64::new(0.0, 0.0);
        }
    }
    let tref = speckle_sim::fft::ifft2(&tspec).unwrap();
    for r in 0..64 {
        for c in 0..64 {
            diff[(r, c)] = rec.values[(r, c)] * tref[(r, c)].conj();
        }
    }
    let mut gx = num_complex::Complex64::new(0.0, 0.0);
    let mut gy = num_complex::Complex64::new(0.0, 0.0);
    for r in inner.clone() {
        for c in inner.clone() {
            if c + 1 < 56 {
                gx += diff[(r, c + 1)] * diff[(r, c)].conj();
            }
            if r + 1 < 56 {
                gy += diff[(r + 1, c)] * diff[(r, c)].conj();
            }
        }
    }
    let (bx, by) = (gx.arg(), gy.arg());
    for r in 0..64 {
        for c in 0..64 {
            let ramp = num_complex::Complex64::from_polar(1.0, bx * c as f64 + by * r as f64);
            diff[(r, c)] *= ramp.conj();
        }
    }
    let mut inner_sum = num_complex::Complex64::new(0.0, 0.0);
    for r in inner.clone() {
        for c in inner.clone() {
            inner_sum += diff[(r, c)];
        }
    }
    let rot = inner_sum / inner_sum.norm();
    let mut sq = 0.0;
    let mut n = 0usize;
    for r in inner.clone() {
        for c in inner.clone() {
            let d = (diff[(r, c)] * rot.conj()).arg();
            sq += d * d;
            n += 1;
        }
    }
    println!("ramp removed ({bx:.4},{by:.4}) rad/px");
    println!("phase RMS {:.4} rad over {} px", (sq / n as f64).sqrt(), n);
    // interior-only RMS: skip pixels within 2 px of a bar edge
    let bar_px = ((std::env::var("PILOT_BAR").ok().and_then(|v| v.parse::<f64>().ok()).unwrap_or(2.4)) / 0.3).round() as usize;
    let mut sq_i = 0.0;
    let mut n_i = 0usize;
    for r in inner.clone() {
        for c in inner.clone() {
            let pos = c % bar_px;
            if bar_px >= 5 && (2..bar_px - 2).contains(&pos) || bar_px < 5 && pos == bar_px / 2 {
                let d = (diff[(r, c)] * rot.conj()).arg();
                sq_i += d * d;
                n_i += 1;
            }
        }
    }
    println!("interior phase RMS {:.4} rad over {} px", (sq_i / n_i as f64).sqrt(), n_i);
    let err_row: Vec<f64> = (8..56).map(|c| ((diff[(32, c)] * rot.conj()).arg()*100.0).round()/100.0).collect();
    println!("err row32: {err_row:?}");
    let row = 32usize;
    let ph: Vec<f64> = (8..56).step_by(2).map(|x| ((rec.values[(row, x)] * rot.conj()).arg()*100.0).round()/100.0).collect();
    let tr: Vec<f64> = (8..56).step_by(2).map(|x| (obj.values[(row, x)].arg()*100.0).round()/100.0).collect();
    let am: Vec<f64> = (8..56).step_by(2).map(|x| ((rec.values[(row, x)]).norm()*100.0).round()/100.0).collect();
    println!("rec phase row32: {ph:?}");
    println!("tru phase row32: {tr:?}");
    println!("rec amp   row32: {am:?}");
    // truth-init cost check
    use speckle_sim::forward::cost_coherent;
    use speckle_sim::ops::{make_pupil, make_defocus_factor};
    let pupil = make_pupil(&optics, gm, &[]).unwrap();
    let mut tc = 0.0;
    for (zi, z) in optics.defocus_planes.iter().enumerate() {
        let dz = make_defocus_factor(&optics, *z, gm).unwrap();
        for (l, frame) in sim.stacks[zi].iter().enumerate() {
            tc += cost_coherent(frame, &obj, &p_c, &pupil, &dz, sim.trajectories[zi].shifts[l]).unwrap();
        }
    }
    println!("cost at ground truth: {tc:.3e}");
    // pattern error in the scanned central region, after global gauge alignment
    let speckle_sim::types::SpecklePattern::ComplexField { values: prec, .. } = &res.pattern
    else { unreachable!() };
    let speckle_sim::types::SpecklePattern::ComplexField { values: ptru, .. } = &p_c
    else { unreachable!() };
    let (pn, off) = (128usize, 32usize);
    let mut num = num_complex::Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for r in off..pn - off {
        for c in off..pn - off {
            num += ptru[(r, c)].conj() * prec[(r, c)];
            den += ptru[(r, c)].norm_sqr();
        }
    }
    let alpha = num / den;
    let mut err = 0.0;
    let mut sig = 0.0;
    for r in off..pn - off {
        for c in off..pn - off {
            err += (prec[(r, c)] - alpha * ptru[(r, c)]).norm_sqr();
            sig += (alpha * ptru[(r, c)]).norm_sqr();
        }
    }
    println!("pattern NMSE (central, gauge-aligned) {:.4}, |alpha| {:.3}", err / sig, alpha.norm());
    let maxp = prec.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let maxpt = ptru.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let maxo = rec.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mino = rec.values.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
    println!("max|p| rec {maxp:.3} tru {maxpt:.3}; |o| in [{mino:.3}, {maxo:.3}]");
    let mut tops: Vec<((usize, usize), f64)> =
        prec.indexed_iter().map(|(idx, v)| (idx, v.norm())).collect();
    tops.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("top |p| pixels: {:?}", tops[..8].iter().map(|(i, v)| (i.0, i.1, (v*10.0).round()/10.0)).collect::<Vec<_>>());
    println!("total {:?}", t0.elapsed());
}

fn run_selfcal() {
    let t0 = std::time::Instant::now();
    let optics = optics_fluor();
    let gm = Grid2D::new(48, 0.2).unwrap();
    let gn = Grid2D::new(96, 0.2).unwrap();
    let Phantom::Fluorescence(obj) = gen_phantom(
        &PhantomSpec::Beads { diameter_um: 0.6, count: 6, density: 1.0, seed: 3 },
        gm,
    )
    .unwrap() else {
        unreachable!()
    };
    let (_, p_f) = gen_speckle(&optics, gn, 9).unwrap();
    let selfcal_rows: usize = std::env::var("PILOT_ROWS").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let plan = AcquisitionPlan {
        rows: selfcal_rows,
        cols: selfcal_rows,
        step_um: 0.4,
        jitter_rms_px: std::env::var("PILOT_JITTER").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0),
        photon_budget: None,
        read_noise: 0.0,
    };
    let sim = simulate_fluor_stack(&obj, &p_f, &plan, &optics, SpeckleMode::Translating, 10)
        .unwrap();

    // perturb the trajectory by uniform +-0.5 px
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let perturbed = ScanTrajectory::new(
        sim.trajectory
            .shifts
            .iter()
            .map(|s| Shift2::new(s.x + rng.gen_range(-0.5..0.5), s.y + rng.gen_range(-0.5..0.5)))
            .collect(),
    );
    println!("initial trajectory RMS error {:.4}", perturbed.rms_distance(&sim.trajectory));

    let ps: f64 = std::env::var("PILOT_POS_STEP").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let truth_base = std::env::var("PILOT_TRUTH_BASE").is_ok();
    let combos: Vec<(&str, f64, bool)> = if std::env::var("PILOT_POS_ONLY").is_ok() {
        vec![("pos-only", ps, true)]
    } else {
        vec![("calibrated", ps, true), ("uncalibrated", 0.0, false), ("truth-traj", 0.0, false)]
    };
    for (label, pos_step, traj_on) in combos {
        let start_traj = if label == "truth-traj" { &sim.trajectory } else { &perturbed };
        let _ = truth_base;
        let iters: usize = std::env::var("PILOT_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(60);
        let mut cfg = SolverConfig { max_iters: iters, pos_step_fluor: pos_step, ..Default::default() };
        cfg.update_mask.trajectory = traj_on;
        cfg.update_mask.transfer = false;
        cfg.trajectory_warmup_iters =
            std::env::var("PILOT_WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
        let mut finit = FluorInit::default();
        if label == "pos-only" {
            cfg.update_mask.object = false;
            cfg.update_mask.pattern = false;
            finit.object = Some(obj.clone());
            finit.pattern = Some(p_f.clone());
        }
        if std::env::var("PILOT_KNOWN_PATTERN").is_ok() {
            cfg.update_mask.pattern = false;
            finit.pattern = Some(p_f.clone());
        }
        let res = solve_fluorescence(
            &sim.stack,
            start_traj,
            gn,
            &cfg,
            &optics,
            finit,
        )
        .unwrap();
        let ObjectEstimate::Fluorescence(rec) = &res.object else { unreachable!() };
        // remove the joint object/trajectory translation gauge before scoring
        let n_sh = res.trajectories[0].shifts.len() as f64;
        let mean_dx = res.trajectories[0]
            .shifts
            .iter()
            .zip(&sim.trajectory.shifts)
            .map(|(a, b)| a.x - b.x)
            .sum::<f64>()
            / n_sh;
        let mean_dy = res.trajectories[0]
            .shifts
            .iter()
            .zip(&sim.trajectory.shifts)
            .map(|(a, b)| a.y - b.y)
            .sum::<f64>()
            / n_sh;
        let resid_rms = (res.trajectories[0]
            .shifts
            .iter()
            .zip(&sim.trajectory.shifts)
            .map(|(a, b)| {
                let dx = a.x - b.x - mean_dx;
                let dy = a.y - b.y - mean_dy;
                dx * dx + dy * dy
            })
            .sum::<f64>()
            / n_sh)
            .sqrt();
        // register the reconstruction to truth before NMSE
        use speckle_sim::ops::{register_subpixel, subpixel_shift};
        use speckle_sim::types::SpecklePattern;
        let reg = register_subpixel(&obj, rec).unwrap();
        let rec_pat = SpecklePattern::real(rec.grid, rec.values.clone()).unwrap();
        let shifted = subpixel_shift(&rec_pat, Shift2::new(-reg.x, -reg.y)).unwrap();
        let SpecklePattern::RealIntensity { values: aligned, .. } = shifted else { unreachable!() };
        let nmse = {
            // compare inside the SIM band: out-of-band truth energy is
            // irrecoverable and would swamp the comparison
            let cutoff = (optics.na_sys + optics.na_illum) / optics.lambda_em;
            let da = fft2_real(&aligned).unwrap();
            let dt = fft2_real(&obj.values).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for ((qy, qx), vt) in dt.indexed_iter() {
                if gm.freq(qx).hypot(gm.freq(qy)) <= cutoff {
                    num += (da[(qy, qx)] - vt).norm_sqr();
                    den += vt.norm_sqr();
                }
            }
            num / den
        };
        println!(
            "{label}: traj RMS {:.4} px (offset-removed {:.4}, drift {:.2},{:.2}), NMSE {:.4}, cost ratio {:.3e}",
            res.trajectories[0].rms_distance(&sim.trajectory),
            resid_rms,
            mean_dx,
            mean_dy,
            nmse,
            res.cost_history.last().unwrap() / res.cost_history[0]
        );
    }
    println!("total {:?}", t0.elapsed());
}

fn run_pupil() {
    let t0 = std::time::Instant::now();
    let optics = OpticalConfig {
        lambda_ex: 0.532,
        lambda_em: 0.605,
        na_sys: 0.2,
        na_illum: 0.4,
        defocus_planes: vec![0.0, 7.0],
        medium_index: 1.0,
    };
    let gm = Grid2D::new(64, 0.3).unwrap();
    let gn = Grid2D::new(128, 0.3).unwrap();
    let Phantom::Coherent(obj) = gen_phantom(
        &PhantomSpec::PhaseTarget { bar_width_um: 0.9, levels_rad: vec![0.0, 1.0, 2.0, 3.0] },
        gm,
    )
    .unwrap() else {
        unreachable!()
    };
    let sd: u64 = std::env::var("PILOT_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let (p_c, _) = gen_speckle(&optics, gn, sd).unwrap();
    let rows: usize = std::env::var("PILOT_ROWS").ok().and_then(|v| v.parse().ok()).unwrap_or(21);
    let plan = AcquisitionPlan {
        rows,
        cols: rows,
        step_um: 0.4,
        jitter_rms_px: 1.0,
        photon_budget: None,
        read_noise: 0.0,
    };
    let astig = speckle_sim::ops::ZernikeTerm { n: 2, m: 2, coeff_rad: 1.0 };
    let sim = simulate_coherent_stacks(&obj, &p_c, &plan, &optics, &[astig], sd + 1).unwrap();
    println!("simulated {}x{} frames in {:?}", sim.stacks.len(), sim.stacks[0].len(), t0.elapsed());

    let iters: usize = std::env::var("PILOT_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let mut cfg = SolverConfig { max_iters: iters, use_acceleration: false, ..Default::default() };
    cfg.update_mask.trajectory = false;
    if let Some(v) = std::env::var("PILOT_TCONST").ok().and_then(|v| v.parse().ok()) {
        cfg.transfer_step_const = Some(v);
    }
    let mut init = CohInit::default();
    if std::env::var("PILOT_KNOWN_PATTERN").is_ok() {
        cfg.update_mask.pattern = false;
        init.pattern = Some(p_c.clone());
    }
    if std::env::var("PILOT_KNOWN_OBJECT").is_ok() {
        cfg.update_mask.object = false;
        init.object = Some(obj.clone());
    }
    let res = solve_coherent(&sim.stacks, &sim.trajectories, gn, &cfg, &optics, init).unwrap();
    println!(
        "cost: initial {:.3e} -> final {:.3e} (ratio {:.4})",
        res.cost_history[0],
        res.cost_history.last().unwrap(),
        res.cost_history.last().unwrap() / res.cost_history[0]
    );

    // correlate recovered pupil phase with the injected astigmatism inside the
    // pupil disk, after projecting out piston and tilt (shift/phase gauges)
    let cutoff = optics.na_sys / optics.lambda_ex;
    let mut samples: Vec<(f64, f64, f64, f64)> = Vec::new(); // (u, v, rec, tru)
    for ((qy, qx), t) in sim.pupil.values.indexed_iter() {
        if t.norm() < 0.5 {
            continue;
        }
        let (fu, fv) = (gm.freq(qx), gm.freq(qy));
        let rho = fu.hypot(fv) / cutoff;
        let theta = fv.atan2(fu);
        let tru = speckle_sim::ops::zernike(2, 2, rho.min(1.0), theta);
        let rec = res.transfer.values[(qy, qx)].arg();
        samples.push((fu / cutoff, fv / cutoff, rec, tru));
    }
    let proj = |vals: &mut Vec<f64>, us: &[f64], vs: &[f64]| {
        // Gram-Schmidt piston + tilt removal over the disk samples
        for basis in [None, Some(0), Some(1)] {
            let b: Vec<f64> = match basis {
                None => vec![1.0; vals.len()],
                Some(0) => us.to_vec(),
                _ => vs.to_vec(),
            };
            let dot: f64 = vals.iter().zip(&b).map(|(a, c)| a * c).sum();
            let nrm: f64 = b.iter().map(|c| c * c).sum();
            for (a, c) in vals.iter_mut().zip(&b) {
                *a -= dot / nrm * c;
            }
        }
    };
    let us: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let vs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let mut rec: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let mut tru: Vec<f64> = samples.iter().map(|s| s.3).collect();
    proj(&mut rec, &us, &vs);
    proj(&mut tru, &us, &vs);
    let num: f64 = rec.iter().zip(&tru).map(|(a, b)| a * b).sum();
    let den = rec.iter().map(|a| a * a).sum::<f64>().sqrt()
        * tru.iter().map(|b| b * b).sum::<f64>().sqrt();
    println!(
        "pupil phase correlation {:.4} over {} in-band samples",
        num / den,
        samples.len()
    );
    println!("total {:?}", t0.elapsed());
}

fn run_posed() {
    let t0 = std::time::Instant::now();
    let optics = optics_fluor();
    let gm = Grid2D::new(48, 0.2).unwrap();
    let gn = Grid2D::new(96, 0.2).unwrap();
    let Phantom::Fluorescence(obj) = gen_phantom(
        &PhantomSpec::Beads { diameter_um: 0.6, count: 6, density: 1.0, seed: 3 },
        gm,
    )
    .unwrap() else {
        unreachable!()
    };
    let rows: usize = std::env::var("PILOT_ROWS").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let iters: usize = std::env::var("PILOT_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(60);
    let plan = AcquisitionPlan {
        rows,
        cols: rows,
        step_um: 0.4,
        jitter_rms_px: 0.0,
        photon_budget: std::env::var("PILOT_PHOTONS").ok().and_then(|v| v.parse().ok()),
        read_noise: 0.0,
    };
    let native_cutoff = 2.0 * optics.na_sys / optics.lambda_em;
    for seed in 1..=5u64 {
        let (_, p_f) = gen_speckle(&optics, gn, seed * 100).unwrap();
        let mut nmse = [0.0f64; 2];
        for (i, mode) in [SpeckleMode::Translating, SpeckleMode::IndependentPerFrame]
            .into_iter()
            .enumerate()
        {
            let sim =
                simulate_fluor_stack(&obj, &p_f, &plan, &optics, mode, seed * 100 + 1).unwrap();
            let traj = if i == 0 {
                sim.trajectory.clone()
            } else {
                // per-frame random speckle carries no usable shift structure;
                // reconstruct under the shared-pattern model at zero shift
                ScanTrajectory::new(vec![Shift2::new(0.0, 0.0); sim.stack.len()])
            };
            let mut cfg = SolverConfig { max_iters: iters, ..Default::default() };
            cfg.update_mask.trajectory = false;
            cfg.update_mask.transfer = false;
            let res = solve_fluorescence(&sim.stack, &traj, gn, &cfg, &optics, FluorInit::default())
                .unwrap();
            let ObjectEstimate::Fluorescence(rec) = &res.object else { unreachable!() };
            use speckle_sim::ops::{register_subpixel, subpixel_shift};
            use speckle_sim::types::SpecklePattern;
            let reg = register_subpixel(&obj, rec).unwrap();
            let rec_pat = SpecklePattern::real(rec.grid, rec.values.clone()).unwrap();
            let shifted = subpixel_shift(&rec_pat, Shift2::new(-reg.x, -reg.y)).unwrap();
            let SpecklePattern::RealIntensity { values: aligned, .. } = shifted else {
                unreachable!()
            };
            let da = fft2_real(&aligned).unwrap();
            let dt = fft2_real(&obj.values).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for ((qy, qx), vt) in dt.indexed_iter() {
                if gm.freq(qx).hypot(gm.freq(qy)) > 2.0 * native_cutoff {
                    num += (da[(qy, qx)] - vt).norm_sqr();
                    den += vt.norm_sqr();
                }
            }
            nmse[i] = num / den;
        }
        println!(
            "seed {seed}: translating {:.4}, independent {:.4} -> {}",
            nmse[0],
            nmse[1],
            if nmse[0] < nmse[1] { "translating better" } else { "INDEPENDENT BETTER" }
        );
    }
    println!("total {:?}", t0.elapsed());
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "fluor".into());
    match which.as_str() {
        "fluor" => run_fluor(),
        "coh" => run_coh(),
        "selfcal" => run_selfcal(),
        "pupil" => run_pupil(),
        "posed" => run_posed(),
        other => eprintln!("unknown pilot {other}"),
    }
}
