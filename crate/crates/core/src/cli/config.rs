//! Problem configuration, read from TOML; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::ModelCoefficients;
use crate::grid::StructuredGrid;
use crate::levelset::TransportParams;
use crate::linalg::NonsymmetricMethod;
use crate::relax::RelaxParams;
use crate::shapeopt::ShapeGradientParams;
use crate::synth::{InclusionGeometry, NoiseSpec};

/// Environment variable overriding the output directory.
pub const OUTPUT_DIR_ENV: &str = "SRCID_OUTPUT_DIR";

/// Coarsest grid plus the refinement levels of both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lx: f64,
    pub ly: f64,
    /// Cell counts on level 0.
    pub nx: usize,
    pub ny: usize,
    pub relax_level: u32,
    pub shape_level: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lx: 3.0,
            ly: 1.0,
            nx: 30,
            ny: 10,
            relax_level: 0,
            shape_level: 2,
        }
    }
}

impl GridConfig {
    pub fn level(&self, level: u32) -> Result<StructuredGrid> {
        Ok(StructuredGrid::new(self.lx, self.ly, self.nx, self.ny)?.refined_times(level))
    }

    pub fn relax_grid(&self) -> Result<StructuredGrid> {
        self.level(self.relax_level)
    }

    pub fn shape_grid(&self) -> Result<StructuredGrid> {
        self.level(self.shape_level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Diffusivity.
    pub c: f64,
    /// Constant transport velocity.
    pub b: [f64; 2],
    pub solver: NonsymmetricMethod,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 0.01,
            b: [1.0, 0.0],
            solver: NonsymmetricMethod::Direct,
        }
    }
}

impl ModelConfig {
    pub fn coefficients(&self) -> Result<ModelCoefficients> {
        ModelCoefficients::new(self.c, self.b)
    }
}

/// `count x count` sensor patches covering `coverage` of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub count: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub geometry: InclusionGeometry,
    pub noise: NoiseSpec,
    /// Absent means full observation.
    pub sensors: Option<SensorConfig>,
    /// Existing measurement file; generated inline when absent.
    pub measurements: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            geometry: InclusionGeometry::two_inclusions(),
            noise: NoiseSpec::default(),
            sensors: None,
            measurements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write every k-th shape iterate; 0 disables snapshots.
    pub snapshot_stride: usize,
    pub vtk: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            snapshot_stride: 0,
            vtk: true,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Worker threads for cell-parallel assembly; 1 gives bit-exact runs.
    pub threads: usize,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub relax: RelaxParams,
    pub shape: ShapeGradientParams,
    pub transport: TransportParams,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for ProblemConfig {
    /// The desk problem: relax on 30x10, shape on 120x40, two inclusions,
    /// full noise-free observation.
    ///
    /// The shape stage uses a stiffer metric and a guarded step; the plain
    /// `alpha = 1e-2`, `dt = 1` combination overshoots on this domain.
    fn default() -> Self {
        Self {
            threads: 1,
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            relax: RelaxParams::default(),
            shape: ShapeGradientParams {
                alpha: 0.9,
                step_halving: true,
                ..ShapeGradientParams::default()
            },
            transport: TransportParams {
                cfl: Some(1.0),
                ..TransportParams::default()
            },
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ProblemConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section; failures surface as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let g = &self.grid;
        if g.shape_level < g.relax_level {
            return Err(Error::Config(format!(
                "shape_level {} is coarser than relax_level {}",
                g.shape_level, g.relax_level
            )));
        }
        let shape_grid = g.shape_grid().map_err(wrap)?;
        self.model.coefficients().map_err(wrap)?;
        self.relax.validate().map_err(wrap)?;
        self.shape.validate().map_err(wrap)?;
        self.transport.validate().map_err(wrap)?;
        self.data.geometry.validate(&shape_grid).map_err(wrap)?;
        if !(self.data.noise.level >= 0.0 && self.data.noise.level.is_finite()) {
            return Err(Error::Config(format!(
                "noise level {} must be non-negative",
                self.data.noise.level
            )));
        }
        if let Some(s) = self.data.sensors {
            if s.count == 0 || !(s.coverage > 0.0 && s.coverage < 1.0) {
                return Err(Error::Config(format!(
                    "sensors need a positive count and coverage in (0, 1), got {s:?}"
                )));
            }
        }
        Ok(())
    }
}
