//! Job configuration: one TOML file drives every mode. Unknown keys are
//! rejected everywhere so typos fail fast instead of silently using defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use speckle_sim::ops::ZernikeTerm;
use speckle_sim::sim::{AcquisitionPlan, PhantomSpec, SpeckleMode};
use speckle_sim::stitch::PatchLayout;
use speckle_sim::types::{Grid2D, OpticalConfig, SolverConfig};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Fluorescence,
    Coherent,
}

/// Reconstruction grid sizes; both grids share one pixel pitch.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub object_px: usize,
    pub pattern_px: usize,
    pub pixel_size_um: f64,
}

impl GridSpec {
    pub fn object_grid(&self) -> AppResult<Grid2D> {
        Ok(Grid2D::new(self.object_px, self.pixel_size_um)?)
    }

    pub fn pattern_grid(&self) -> AppResult<Grid2D> {
        Ok(Grid2D::new(self.pattern_px, self.pixel_size_um)?)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Input stack directory (reconstruction / register modes).
    pub input: Option<PathBuf>,
    /// Output directory; overridable with `--out`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    /// Must match the mode given on the command line when present.
    pub mode: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for patch-level parallelism; 0 = auto.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub paths: Paths,
    pub optics: Option<OpticalConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub acquisition: Option<AcquisitionPlan>,
    pub phantom: Option<PhantomSpec>,
    pub grids: Option<GridSpec>,
    pub channel: Option<Channel>,
    pub speckle_mode: Option<SpeckleMode>,
    #[serde(default)]
    pub aberrations: Vec<ZernikeTerm>,
    pub stitch: Option<PatchLayout>,
}

impl JobConfig {
    pub fn parse(bytes: &[u8]) -> AppResult<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| AppError::Config(format!("config is not UTF-8: {e}")))?;
        let cfg: JobConfig =
            toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.solver.validate()?;
        if let Some(o) = &cfg.optics {
            o.validate()?;
        }
        if let Some(a) = &cfg.acquisition {
            a.validate()?;
        }
        Ok(cfg)
    }

    pub fn require_optics(&self) -> AppResult<&OpticalConfig> {
        self.optics.as_ref().ok_or_else(|| AppError::Config("missing [optics]".into()))
    }

    pub fn require_grids(&self) -> AppResult<&GridSpec> {
        self.grids.as_ref().ok_or_else(|| AppError::Config("missing [grids]".into()))
    }

    pub fn require_acquisition(&self) -> AppResult<&AcquisitionPlan> {
        self.acquisition
            .as_ref()
            .ok_or_else(|| AppError::Config("missing [acquisition]".into()))
    }

    pub fn require_phantom(&self) -> AppResult<&PhantomSpec> {
        self.phantom.as_ref().ok_or_else(|| AppError::Config("missing [phantom]".into()))
    }

    pub fn require_input(&self) -> AppResult<&Path> {
        self.paths
            .input
            .as_deref()
            .ok_or_else(|| AppError::Config("missing paths.input".into()))
    }

    pub fn require_stitch(&self) -> AppResult<&PatchLayout> {
        self.stitch.as_ref().ok_or_else(|| AppError::Config("missing [stitch]".into()))
    }
}
