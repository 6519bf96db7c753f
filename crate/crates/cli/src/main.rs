//! Batch driver: `speckle-sim <mode> --config <path> [--out DIR]
//! [--threads N] [--seed S]`. Exit codes: 0 ok, 2 configuration error,
//! 3 I/O error, 4 numerical abort, 5 invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use speckle_sim_cli::artifacts;
use speckle_sim_cli::config::JobConfig;
use speckle_sim_cli::error::{AppError, AppResult};
use speckle_sim_cli::modes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Simulate,
    ReconstructFluor,
    ReconstructPhase,
    Register,
    CheckGradients,
    Stitch,
    PosednessBench,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::ReconstructFluor => "reconstruct-fluor",
            Mode::ReconstructPhase => "reconstruct-phase",
            Mode::Register => "register",
            Mode::CheckGradients => "check-gradients",
            Mode::Stitch => "stitch",
            Mode::PosednessBench => "posedness-bench",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "speckle-sim", version, about = "Blind speckle-illumination reconstruction")]
struct Cli {
    /// What to run.
    #[arg(value_enum)]
    mode: Mode,
    /// Job configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides paths.out in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = auto (overrides the config).
    #[arg(long)]
    threads: Option<usize>,
    /// Base RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> AppResult<()> {
    let config_bytes = std::fs::read(&cli.config)
        .map_err(|e| AppError::Config(format!("{}: {e}", cli.config.display())))?;
    let mut cfg = JobConfig::parse(&config_bytes)?;
    if let Some(mode) = &cfg.mode {
        if mode != cli.mode.as_str() {
            return Err(AppError::Config(format!(
                "config says mode = {mode:?} but the command line asked for {}",
                cli.mode.as_str()
            )));
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;

    let artifacts = match cli.mode {
        Mode::Simulate => modes::simulate(&cfg, &out)?,
        Mode::ReconstructFluor => modes::reconstruct_fluor(&cfg, &out)?,
        Mode::ReconstructPhase => modes::reconstruct_phase(&cfg, &out)?,
        Mode::Register => modes::register(&cfg, &out)?,
        Mode::CheckGradients => modes::check_gradients(&cfg, &out)?,
        Mode::Stitch => modes::stitch(&cfg, &out)?,
        Mode::PosednessBench => modes::posedness_bench(&cfg, &out)?,
    };
    artifacts::write_run_manifest(&out, cli.mode.as_str(), &config_bytes, cfg.seed, &artifacts)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("speckle-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
