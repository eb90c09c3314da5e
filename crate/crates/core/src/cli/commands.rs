//! The pipeline stages behind each subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cli::config::ProblemConfig;
use crate::cli::io::{self, HistoryRow, VtkData};
use crate::error::{Error, Result};
use crate::fem::MeasurementMask;
use crate::grid::{prolongate, ScalarField, StructuredGrid};
use crate::levelset::{count_components, round_to_levelset, LevelSet};
use crate::relax::{initial_control, kkt_violation, solve_relaxed, NewtonRecord, ReducedProblem};
use crate::shapeopt::{shape_descent_loop, ShapeProblem, ShapeRecord, ShapeStop};
use crate::synth::{add_noise, indicator_levelset, reference_state, restrict_measurements, sensor_mask};

pub const TRUTH_FILE: &str = "truth.srcf";
pub const REFERENCE_FILE: &str = "reference.srcf";
pub const MEASUREMENTS_FILE: &str = "measurements.srcf";
pub const MASK_FILE: &str = "mask.json";
pub const RELAXED_FILE: &str = "f_relaxed.srcf";
pub const INITIAL_FILE: &str = "phi0.srcf";
pub const FINAL_FILE: &str = "phi_final.srcf";
pub const STATE_FILE: &str = "u_final.srcf";
pub const HISTORY_FILE: &str = "history.csv";
pub const RECORD_FILE: &str = "run.json";
pub const VTK_FILE: &str = "final.vtk";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Observed data on the shape grid plus the sensor region.
#[derive(Debug, Clone)]
pub struct Measurements {
    pub values: ScalarField,
    pub mask: MeasurementMask,
    /// Known only when the data were generated in this process.
    pub truth: Option<LevelSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxSummary {
    pub grid: [usize; 2],
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub kkt_violation: f64,
    pub initial_components: usize,
    pub pde_solves: usize,
    pub wall_seconds: f64,
    pub history: Vec<NewtonRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub grid: [usize; 2],
    pub iterations: usize,
    pub stop: ShapeStop,
    pub best_iteration: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_psi_norm: f64,
    pub components: usize,
    pub pde_solves: usize,
    pub wall_seconds: f64,
    pub history: Vec<ShapeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

/// Everything a run produced, with the config needed to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ProblemConfig,
    pub relax: Option<RelaxSummary>,
    pub shape: Option<ShapeSummary>,
    pub metrics: Option<MetricsReport>,
    pub failure: Option<StageFailure>,
    pub files: Vec<PathBuf>,
    pub wall_seconds: f64,
}

impl RunRecord {
    fn new(config: &ProblemConfig) -> Self {
        Self {
            config: config.clone(),
            relax: None,
            shape: None,
            metrics: None,
            failure: None,
            files: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    /// True when every stage that ran reached its tolerance.
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
            && self.relax.as_ref().is_none_or(|r| r.converged)
            && self.shape.as_ref().is_none_or(|s| s.stop == ShapeStop::Converged)
    }

    fn fail(&mut self, stage: &str, err: &Error) {
        warn!("{stage} stage failed: {err}");
        self.failure = Some(StageFailure {
            stage: stage.into(),
            message: err.to_string(),
        });
    }
}

/// Files written by [`cmd_generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedFiles {
    pub truth: PathBuf,
    pub reference: PathBuf,
    pub measurements: PathBuf,
    pub mask: PathBuf,
}

/// Sensor region from the config, snapped to the relaxation grid so it is
/// cell-aligned on every finer level too.
pub fn measurement_mask(cfg: &ProblemConfig) -> Result<MeasurementMask> {
    match cfg.data.sensors {
        None => Ok(MeasurementMask::Full),
        Some(s) => Ok(sensor_mask(s.count, s.coverage, &cfg.grid.relax_grid()?)?.mask),
    }
}

/// Writes the truth level set, the noise-free state, the measurements and
/// the sensor mask.
pub fn cmd_generate(cfg: &ProblemConfig, out: &Path) -> Result<GeneratedFiles> {
    let grid = cfg.grid.shape_grid()?;
    let coeffs = cfg.model.coefficients()?;
    let truth = indicator_levelset(&cfg.data.geometry, &grid);
    let reference = reference_state(&cfg.data.geometry, &grid, &coeffs)?;
    let measured = add_noise(&reference, &cfg.data.noise)?;
    let mask = measurement_mask(cfg)?;
    let files = GeneratedFiles {
        truth: out.join(TRUTH_FILE),
        reference: out.join(REFERENCE_FILE),
        measurements: out.join(MEASUREMENTS_FILE),
        mask: out.join(MASK_FILE),
    };
    io::write_scalar(&files.truth, &truth)?;
    io::write_scalar(&files.reference, &reference)?;
    io::write_scalar(&files.measurements, &measured)?;
    io::write_json(&files.mask, &mask)?;
    info!("generated data on {}x{} into {}", grid.nx(), grid.ny(), out.display());
    Ok(files)
}

/// Loads the configured measurement file or simulates the data in memory.
pub fn measurements(cfg: &ProblemConfig) -> Result<Measurements> {
    let grid = cfg.grid.shape_grid()?;
    let mask = measurement_mask(cfg)?;
    match &cfg.data.measurements {
        Some(path) => {
            let values = io::read_scalar(path)?;
            if !values.grid().same_lattice(&grid) {
                return Err(Error::Config(format!(
                    "{} holds a {}x{} field, the shape grid is {}x{}",
                    path.display(),
                    values.grid().nx(),
                    values.grid().ny(),
                    grid.nx(),
                    grid.ny()
                )));
            }
            let values = ScalarField::new(grid, values.into_coeffs())?;
            Ok(Measurements {
                values,
                mask,
                truth: None,
            })
        }
        None => {
            let coeffs = cfg.model.coefficients()?;
            let reference = reference_state(&cfg.data.geometry, &grid, &coeffs)?;
            Ok(Measurements {
                values: add_noise(&reference, &cfg.data.noise)?,
                mask,
                truth: Some(indicator_levelset(&cfg.data.geometry, &grid)),
            })
        }
    }
}

fn dims(g: &StructuredGrid) -> [usize; 2] {
    [g.nx(), g.ny()]
}

/// Relaxed problem on the relaxation grid; returns `phi0` on the shape grid.
fn relax_stage(
    cfg: &ProblemConfig,
    data: &Measurements,
    out: &Path,
    record: &mut RunRecord,
) -> Result<Option<LevelSet>> {
    let start = Instant::now();
    let coarse = cfg.grid.relax_grid()?;
    let coeffs = cfg.model.coefficients()?;
    let target = restrict_measurements(&data.values, &coarse)?;
    let problem = ReducedProblem::new(&coeffs, &data.mask, target, cfg.relax.mu, cfg.model.solver)?;
    let outcome = match solve_relaxed(&problem, &initial_control(coarse), &cfg.relax) {
        Ok(o) => o,
        Err(e @ Error::NotConverged { .. }) => {
            record.fail("relax", &e);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let rounded = match round_to_levelset(&outcome.f) {
        Ok(r) => r,
        Err(e @ Error::DegenerateControl(_)) => {
            record.fail("rounding", &e);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let phi0 = prolongate(&rounded, &cfg.grid.shape_grid()?)?;
    let summary = RelaxSummary {
        grid: dims(&coarse),
        iterations: outcome.history.len(),
        converged: outcome.converged,
        objective: problem.misfit(outcome.f.coeffs())?,
        kkt_violation: kkt_violation(&problem, &outcome)?,
        initial_components: count_components(&phi0),
        pde_solves: problem.pde_solves(),
        wall_seconds: start.elapsed().as_secs_f64(),
        history: outcome.history,
    };
    info!(
        "relax: {} Newton steps, misfit {:.4e}, phi0 has {} component(s)",
        summary.iterations, summary.objective, summary.initial_components
    );
    for (name, field) in [(RELAXED_FILE, &outcome.f), (INITIAL_FILE, &phi0)] {
        let path = out.join(name);
        io::write_scalar(&path, field)?;
        record.files.push(path);
    }
    record.relax = Some(summary);
    Ok(Some(phi0))
}

/// Shape descent from `phi0`; writes snapshots, the final fields and VTK.
fn shape_stage(
    cfg: &ProblemConfig,
    data: &Measurements,
    phi0: &LevelSet,
    out: &Path,
    record: &mut RunRecord,
) -> Result<()> {
    let start = Instant::now();
    let grid = cfg.grid.shape_grid()?;
    if !phi0.grid().same_lattice(&grid) {
        return Err(Error::Config(format!(
            "initial level set is {}x{}, the shape grid is {}x{}",
            phi0.grid().nx(),
            phi0.grid().ny(),
            grid.nx(),
            grid.ny()
        )));
    }
    let phi0 = ScalarField::new(grid, phi0.coeffs().to_vec())?;
    let coeffs = cfg.model.coefficients()?;
    let problem = ShapeProblem::new(&coeffs, &data.mask, data.values.clone(), cfg.model.solver)?;
    let stride = cfg.output.snapshot_stride;
    let mut snapshot_error = None;
    let mut snapshots = Vec::new();
    let outcome = shape_descent_loop(&problem, &phi0, &cfg.shape, &cfg.transport, |it, rec| {
        if stride == 0 || rec.iteration % stride != 0 || snapshot_error.is_some() {
            return;
        }
        let path = out.join(SNAPSHOT_DIR).join(format!("phi_{:05}.srcf", rec.iteration));
        match io::write_scalar(&path, &it.phi) {
            Ok(()) => snapshots.push(path),
            Err(e) => snapshot_error = Some(e),
        }
    });
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::NotConverged { .. }) => {
            record.fail("shape", &e);
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    record.files.extend(snapshots);
    let u = problem.solve_state(&outcome.phi)?;
    let last = outcome.history.last().expect("history holds the initial iterate");
    let summary = ShapeSummary {
        grid: dims(&grid),
        iterations: last.iteration,
        stop: outcome.stop,
        best_iteration: outcome.best_iteration,
        initial_objective: outcome.history[0].objective,
        final_objective: problem.objective_of_state(&u),
        final_psi_norm: last.psi_norm,
        components: count_components(&outcome.phi),
        pde_solves: problem.pde_solves(),
        wall_seconds: start.elapsed().as_secs_f64(),
        history: outcome.history,
    };
    info!(
        "shape: {} iterations ({:?}), J {:.4e} -> {:.4e}, {} component(s)",
        summary.iterations, summary.stop, summary.initial_objective, summary.final_objective, summary.components
    );
    for (name, field) in [(FINAL_FILE, &outcome.phi), (STATE_FILE, &u)] {
        let path = out.join(name);
        io::write_scalar(&path, field)?;
        record.files.push(path);
    }
    if cfg.output.vtk {
        let path = out.join(VTK_FILE);
        let mut fields = vec![
            VtkData::Scalar("phi", &outcome.phi),
            VtkData::Scalar("phi0", &phi0),
            VtkData::Scalar("u", &u),
            VtkData::Scalar("measurements", &data.values),
        ];
        if let Some(t) = &data.truth {
            fields.push(VtkData::Scalar("truth", t));
        }
        io::write_vtk(&path, &grid, &fields)?;
        record.files.push(path);
    }
    if let Some(t) = &data.truth {
        record.metrics = Some(metrics(&outcome.phi, t)?);
    }
    record.shape = Some(summary);
    Ok(())
}

fn finish(record: &mut RunRecord, out: &Path, start: Instant) -> Result<()> {
    let mut rows: Vec<HistoryRow> = Vec::new();
    if let Some(r) = &record.relax {
        rows.extend(r.history.iter().map(HistoryRow::from));
    }
    if let Some(s) = &record.shape {
        rows.extend(s.history.iter().map(HistoryRow::from));
    }
    let history = out.join(HISTORY_FILE);
    io::write_history(&history, &rows)?;
    record.files.push(history);
    record.files.push(out.join(RECORD_FILE));
    record.wall_seconds = start.elapsed().as_secs_f64();
    io::write_json(&out.join(RECORD_FILE), record)
}

/// Relaxation only: writes the relaxed control and the prolongated `phi0`.
pub fn cmd_relax(cfg: &ProblemConfig, out: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut record = RunRecord::new(cfg);
    let data = measurements(cfg)?;
    relax_stage(cfg, &data, out, &mut record)?;
    finish(&mut record, out, start)?;
    Ok(record)
}

/// Shape stage only, starting from `initial` (default: `phi0` in `out`).
pub fn cmd_shape(cfg: &ProblemConfig, out: &Path, initial: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    let mut record = RunRecord::new(cfg);
    let data = measurements(cfg)?;
    let default = out.join(INITIAL_FILE);
    let phi0 = io::read_scalar(initial.unwrap_or(&default))?;
    shape_stage(cfg, &data, &phi0, out, &mut record)?;
    finish(&mut record, out, start)?;
    Ok(record)
}

/// The full pipeline: relax, round, prolongate, shape.
pub fn cmd_run(cfg: &ProblemConfig, out: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut record = RunRecord::new(cfg);
    let data = measurements(cfg)?;
    if let Some(phi0) = relax_stage(cfg, &data, out, &mut record)? {
        shape_stage(cfg, &data, &phi0, out, &mut record)?;
    }
    finish(&mut record, out, start)?;
    Ok(record)
}

/// Agreement between a recovered and a true source region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Intersection over union of the positive cell sets.
    pub iou: f64,
    pub symmetric_difference_area: f64,
    pub components: usize,
    pub truth_components: usize,
}

/// Cells whose centre value is positive.
pub fn positive_cells(phi: &LevelSet) -> Vec<bool> {
    (0..phi.grid().num_cells())
        .map(|c| phi.eval_in_cell(c, 0.5, 0.5) > 0.0)
        .collect()
}

/// Compares two level sets on the same or nested grids; the coarser one is
/// interpolated onto the finer grid first.
pub fn metrics(phi: &LevelSet, truth: &LevelSet) -> Result<MetricsReport> {
    let (a, b) = if phi.grid().refinement_depth_over(truth.grid()).is_some() {
        (phi.clone(), prolongate(truth, phi.grid())?)
    } else if truth.grid().refinement_depth_over(phi.grid()).is_some() {
        (prolongate(phi, truth.grid())?, truth.clone())
    } else {
        return Err(Error::invalid(format!(
            "level sets on {}x{} and {}x{} are not nested",
            phi.grid().nx(),
            phi.grid().ny(),
            truth.grid().nx(),
            truth.grid().ny()
        )));
    };
    let (pa, pb) = (positive_cells(&a), positive_cells(&b));
    let inter = pa.iter().zip(&pb).filter(|(x, y)| **x && **y).count();
    let union = pa.iter().zip(&pb).filter(|(x, y)| **x || **y).count();
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(MetricsReport {
        iou,
        symmetric_difference_area: (union - inter) as f64 * a.grid().cell_area(),
        components: count_components(&a),
        truth_components: count_components(&b),
    })
}

/// Reads both files and compares them.
pub fn cmd_metrics(phi: &Path, truth: &Path) -> Result<MetricsReport> {
    metrics(&io::read_scalar(phi)?, &io::read_scalar(truth)?)
}
