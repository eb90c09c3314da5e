//! Shape optimization of the source region with a volume-form shape
//! derivative and level-set transport.
//!
//! With `f = chi{phi > 0}`, `S u = l(phi)` and the adjoint `S^T w = -Mm (u - ub)`,
//! the objective `J = 1/2 int_m (u - ub)^2` is differentiated with respect to
//! deformations `v` of the source region. The derivative is represented in
//! the metric `a2(p, q) = (1 - alpha) int grad p : grad q + alpha int p . q`
//! and the level set is transported along the negative representative.

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    assemble_laplacian, assemble_mass, assemble_measurement_mass, assemble_source_load, assemble_state_operator,
    physical_gradients, select_quadrature, MeasurementMask, ModelCoefficients, SparseOperator,
};
use crate::grid::{shape_values, ScalarField, StructuredGrid, VectorField};
use crate::levelset::{count_components, transport_step, LevelSet, TransportParams};
use crate::linalg::{dot, NonsymmetricMethod, PdeSolver};

/// Which volume expression of the shape derivative is assembled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeDerivativeForm {
    /// Full volume form for a deformation of the whole problem, measurement
    /// data included.
    Theorem,
    /// Volume form for a deformation of the source region only, with the
    /// measurements and the sensor region held fixed.
    FixedData,
    /// `-int_{phi > 0} div(w v) dx`: the exact derivative of the discrete
    /// objective on the fixed grid.
    #[default]
    Source,
}

/// Parameters of the descent loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeGradientParams {
    /// Blend between the gradient and the mass part of the metric.
    pub alpha: f64,
    /// Stopping tolerance on `||psi||_L2`.
    pub tol: f64,
    pub max_iters: usize,
    pub form: ShapeDerivativeForm,
    /// Halve the transport step while the objective increases.
    pub step_halving: bool,
    /// Halvings tried per iteration when `step_halving` is on.
    pub max_halvings: usize,
}

impl Default for ShapeGradientParams {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            tol: 1e-4,
            max_iters: 200,
            form: ShapeDerivativeForm::default(),
            step_halving: false,
            max_halvings: 12,
        }
    }
}

impl ShapeGradientParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("shape tolerance must be positive"));
        }
        Ok(())
    }
}

/// Operators shared by every iteration of the shape stage on one grid.
#[derive(Debug)]
pub struct ShapeProblem {
    grid: StructuredGrid,
    coeffs: ModelCoefficients,
    mask: MeasurementMask,
    target: ScalarField,
    state: PdeSolver,
    mass: SparseOperator,
    meas_mass: SparseOperator,
}

impl ShapeProblem {
    pub fn new(
        coeffs: &ModelCoefficients,
        mask: &MeasurementMask,
        target: ScalarField,
        method: NonsymmetricMethod,
    ) -> Result<Self> {
        let grid = *target.grid();
        coeffs.validate()?;
        let state = PdeSolver::for_grid(assemble_state_operator(&grid, coeffs), &grid, method, 1e-12)?;
        Ok(Self {
            grid,
            coeffs: *coeffs,
            mask: mask.clone(),
            meas_mass: assemble_measurement_mass(&grid, mask)?,
            mass: assemble_mass(&grid),
            target,
            state,
        })
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &ModelCoefficients {
        &self.coeffs
    }

    pub fn mask(&self) -> &MeasurementMask {
        &self.mask
    }

    pub fn target(&self) -> &ScalarField {
        &self.target
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn measurement_mass(&self) -> &SparseOperator {
        &self.meas_mass
    }

    pub fn pde_solves(&self) -> usize {
        self.state.solve_count()
    }

    fn check(&self, phi: &LevelSet) -> Result<()> {
        if !phi.grid().same_lattice(&self.grid) {
            return Err(Error::invalid("level set lives on a different grid than the problem"));
        }
        Ok(())
    }

    /// State for the source `chi{phi > 0}`.
    pub fn solve_state(&self, phi: &LevelSet) -> Result<ScalarField> {
        self.check(phi)?;
        let load = assemble_source_load(&self.grid, phi, None)?;
        ScalarField::new(self.grid, self.state.solve(&load)?.0)
    }

    /// Adjoint `S^T w = -Mm (u - ub)`.
    pub fn solve_adjoint(&self, u: &ScalarField) -> Result<ScalarField> {
        let r = self.residual(u);
        let rhs: Vec<f64> = self.meas_mass.apply(&r).into_iter().map(|v| -v).collect();
        ScalarField::new(self.grid, self.state.solve_transpose(&rhs)?.0)
    }

    fn residual(&self, u: &ScalarField) -> Vec<f64> {
        u.coeffs()
            .iter()
            .zip(self.target.coeffs())
            .map(|(a, b)| a - b)
            .collect()
    }

    /// `1/2 (u - ub)^T Mm (u - ub)`.
    pub fn objective_of_state(&self, u: &ScalarField) -> f64 {
        let r = self.residual(u);
        0.5 * dot(&r, &self.meas_mass.apply(&r))
    }

    pub fn objective(&self, phi: &LevelSet) -> Result<f64> {
        Ok(self.objective_of_state(&self.solve_state(phi)?))
    }
}

/// State for the source region `{phi > 0}`.
pub fn solve_state_shape(grid: &StructuredGrid, coeffs: &ModelCoefficients, phi: &LevelSet) -> Result<ScalarField> {
    let solver = PdeSolver::for_grid(
        assemble_state_operator(grid, coeffs),
        grid,
        NonsymmetricMethod::Direct,
        1e-12,
    )?;
    let load = assemble_source_load(grid, phi, None)?;
    ScalarField::new(*grid, solver.solve(&load)?.0)
}

/// Adjoint `S^T w = -Mm (u - ub)`.
pub fn solve_adjoint_shape(
    grid: &StructuredGrid,
    coeffs: &ModelCoefficients,
    u: &ScalarField,
    target: &ScalarField,
    mask: &MeasurementMask,
) -> Result<ScalarField> {
    let problem = ShapeProblem::new(coeffs, mask, target.clone(), NonsymmetricMethod::Direct)?;
    if !u.grid().same_lattice(grid) || !target.grid().same_lattice(grid) {
        return Err(Error::invalid("state and measurements must live on the problem grid"));
    }
    problem.solve_adjoint(u)
}

/// Shape derivative as a functional on `(V_h)^2`, component-major:
/// entry `k * n + a` is `dJ[N_a e_k]`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_shape_derivative(
    grid: &StructuredGrid,
    coeffs: &ModelCoefficients,
    u: &ScalarField,
    w: &ScalarField,
    phi: &LevelSet,
    target: &ScalarField,
    mask: &MeasurementMask,
    form: ShapeDerivativeForm,
) -> Result<Vec<f64>> {
    for (name, f) in [
        ("state", u),
        ("adjoint", w),
        ("level set", phi),
        ("measurements", target),
    ] {
        if !f.grid().same_lattice(grid) {
            return Err(Error::invalid(format!("{name} lives on a different grid")));
        }
    }
    let n = grid.num_nodes();
    let area = grid.cell_area();
    let (c, b) = (coeffs.c, coeffs.b);
    let per_cell: Vec<[[f64; 4]; 2]> = (0..grid.num_cells())
        .into_par_iter()
        .map(|cell| {
            let pv = phi.cell_values(cell);
            let uv = u.cell_values(cell);
            let wv = w.cell_values(cell);
            let tv = target.cell_values(cell);
            let [x0, y0] = grid.cell_origin(cell);
            let mut local = [[0.0; 4]; 2];
            let source_only = form == ShapeDerivativeForm::Source;
            if source_only && pv.iter().all(|&v| v <= 0.0) {
                return local;
            }
            for ([xi, eta], wq) in select_quadrature(&pv).iter() {
                let nv = shape_values(xi, eta);
                let g = physical_gradients(grid, xi, eta);
                let interp = |v: &[f64; 4]| -> f64 { (0..4).map(|a| nv[a] * v[a]).sum() };
                let grad = |v: &[f64; 4]| -> [f64; 2] {
                    let mut out = [0.0; 2];
                    for a in 0..4 {
                        out[0] += g[a][0] * v[a];
                        out[1] += g[a][1] * v[a];
                    }
                    out
                };
                let f = if interp(&pv) > 0.0 { 1.0 } else { 0.0 };
                let (uq, wq_val) = (interp(&uv), interp(&wv));
                let (du, dw) = (grad(&uv), grad(&wv));
                let weight = wq * area;
                if source_only {
                    if f == 0.0 {
                        continue;
                    }
                    for a in 0..4 {
                        for k in 0..2 {
                            local[k][a] -= weight * (dw[k] * nv[a] + wq_val * g[a][k]);
                        }
                    }
                    continue;
                }
                let pt = [x0 + xi * grid.hx(), y0 + eta * grid.hy()];
                let chi = if mask.contains(pt) { 1.0 } else { 0.0 };
                let res = uq - interp(&tv);
                let du_dw = du[0] * dw[0] + du[1] * dw[1];
                let b_dw = b[0] * dw[0] + b[1] * dw[1];
                let bracket_common = c * du_dw - uq * b_dw - f * wq_val;
                for a in 0..4 {
                    let ga = g[a];
                    let ga_dw = ga[0] * dw[0] + ga[1] * dw[1];
                    let ga_du = ga[0] * du[0] + ga[1] * du[1];
                    let b_ga = b[0] * ga[0] + b[1] * ga[1];
                    for k in 0..2 {
                        let mut val = -c * (du[k] * ga_dw + ga_du * dw[k]) + uq * dw[k] * b_ga + ga[k] * bracket_common;
                        match form {
                            ShapeDerivativeForm::Theorem => val += ga[k] * 0.5 * chi * res * res,
                            ShapeDerivativeForm::FixedData => val -= chi * res * du[k] * nv[a],
                            ShapeDerivativeForm::Source => unreachable!(),
                        }
                        local[k][a] += weight * val;
                    }
                }
            }
            local
        })
        .collect();
    let mut dj = vec![0.0; 2 * n];
    for (cell, local) in per_cell.iter().enumerate() {
        for (a, node) in grid.cell_nodes(cell).into_iter().enumerate() {
            dj[node] += local[0][a];
            dj[n + node] += local[1][a];
        }
    }
    Ok(dj)
}

/// Factored metric `a2` for the Riesz representation of the derivative.
#[derive(Debug)]
pub struct GradientMetric {
    grid: StructuredGrid,
    alpha: f64,
    operator: PdeSolver,
}

impl GradientMetric {
    pub fn new(grid: &StructuredGrid, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        let a2 = assemble_laplacian(grid).linear_combination(1.0 - alpha, &assemble_mass(grid), alpha);
        Ok(Self {
            grid: *grid,
            alpha,
            operator: PdeSolver::for_grid(a2, grid, NonsymmetricMethod::Direct, 1e-13)?,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Scalar block of `a2` (both components share it).
    pub fn operator(&self) -> &SparseOperator {
        self.operator.operator()
    }

    /// Solves `a2(psi, v) = dJ[v]` for all `v`.
    pub fn represent(&self, dj: &[f64]) -> Result<VectorField> {
        let n = self.grid.num_nodes();
        if dj.len() != 2 * n {
            return Err(Error::invalid(format!(
                "shape derivative has length {}, expected {}",
                dj.len(),
                2 * n
            )));
        }
        let px = self.operator.solve(&dj[..n])?.0;
        let py = self.operator.solve(&dj[n..])?.0;
        VectorField::new(ScalarField::new(self.grid, px)?, ScalarField::new(self.grid, py)?)
    }
}

/// Solves `a2(psi, v) = dJ[v]` on `grid`.
pub fn gradient_representation(grid: &StructuredGrid, dj: &[f64], alpha: f64) -> Result<VectorField> {
    GradientMetric::new(grid, alpha)?.represent(dj)
}

/// `||psi||_L2` via the mass matrix.
pub fn l2_norm(psi: &VectorField, mass: &SparseOperator) -> f64 {
    psi.components()
        .iter()
        .map(|c| dot(c.coeffs(), &mass.apply(c.coeffs())))
        .sum::<f64>()
        .sqrt()
}

/// Everything computed at one level set.
#[derive(Debug, Clone)]
pub struct ShapeIterate {
    pub phi: LevelSet,
    pub u: ScalarField,
    pub w: ScalarField,
    pub psi: VectorField,
    pub objective: f64,
    pub psi_norm: f64,
}

/// Evaluates state, adjoint, derivative and gradient at `phi`.
pub fn evaluate(
    problem: &ShapeProblem,
    metric: &GradientMetric,
    phi: &LevelSet,
    form: ShapeDerivativeForm,
) -> Result<ShapeIterate> {
    let u = problem.solve_state(phi)?;
    let w = problem.solve_adjoint(&u)?;
    let dj = assemble_shape_derivative(
        &problem.grid,
        &problem.coeffs,
        &u,
        &w,
        phi,
        &problem.target,
        &problem.mask,
        form,
    )?;
    let psi = metric.represent(&dj)?;
    Ok(ShapeIterate {
        objective: problem.objective_of_state(&u),
        psi_norm: l2_norm(&psi, &problem.mass),
        phi: phi.clone(),
        u,
        w,
        psi,
    })
}

/// One row of the shape-stage history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub iteration: usize,
    /// `1/2 ||u - ub||^2` over the sensor region.
    pub objective: f64,
    /// `||u - ub||` over the sensor region.
    pub misfit_norm: f64,
    pub psi_norm: f64,
    pub components: usize,
    /// Transport step actually used.
    pub dt: f64,
    /// Cumulative PDE solves.
    pub pde_solves: usize,
}

/// Why the descent loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeStop {
    Converged,
    IterationCap,
    /// `phi` lost its positive part; the gradient vanishes trivially.
    RegionVanished,
}

#[derive(Debug, Clone)]
pub struct ShapeOutcome {
    /// Final level set, or the best one seen when not converged.
    pub phi: LevelSet,
    pub best_iteration: usize,
    pub history: Vec<ShapeRecord>,
    pub stop: ShapeStop,
}

impl ShapeOutcome {
    pub fn converged(&self) -> bool {
        self.stop == ShapeStop::Converged
    }
}

/// Descent loop: state, adjoint, derivative, representation, transport,
/// until `||psi||_L2 <= tol` or the iteration cap.
pub fn shape_descent_loop<F>(
    problem: &ShapeProblem,
    phi0: &LevelSet,
    params: &ShapeGradientParams,
    transport: &TransportParams,
    mut on_iterate: F,
) -> Result<ShapeOutcome>
where
    F: FnMut(&ShapeIterate, &ShapeRecord),
{
    params.validate()?;
    transport.validate()?;
    problem.check(phi0)?;
    let metric = GradientMetric::new(&problem.grid, params.alpha)?;
    let mut current = evaluate(problem, &metric, phi0, params.form)?;
    let mut history = Vec::new();
    let mut best = (current.objective, 0, current.phi.clone());
    let mut dt = transport.dt;
    for k in 0..=params.max_iters {
        let record = ShapeRecord {
            iteration: k,
            objective: current.objective,
            misfit_norm: (2.0 * current.objective).sqrt(),
            psi_norm: current.psi_norm,
            components: count_components(&current.phi),
            dt,
            pde_solves: problem.pde_solves(),
        };
        debug!(
            "shape {k}: J = {:.6e}, |psi| = {:.3e}, components = {}",
            record.objective, record.psi_norm, record.components
        );
        on_iterate(&current, &record);
        history.push(record);
        if current.objective < best.0 {
            best = (current.objective, k, current.phi.clone());
        }
        if current.phi.max() <= 0.0 {
            warn!(
                "source region vanished at iteration {k}; returning the best iterate ({})",
                best.1
            );
            return Ok(ShapeOutcome {
                phi: best.2,
                best_iteration: best.1,
                history,
                stop: ShapeStop::RegionVanished,
            });
        }
        if current.psi_norm <= params.tol {
            info!("shape stage converged after {k} iterations");
            return Ok(ShapeOutcome {
                phi: current.phi,
                best_iteration: best.1,
                history,
                stop: ShapeStop::Converged,
            });
        }
        if k == params.max_iters {
            break;
        }
        let mut step = TransportParams {
            dt: transport.effective_dt(&current.psi),
            cfl: None,
            ..*transport
        };
        let mut next = evaluate(
            problem,
            &metric,
            &transport_step(&current.phi, &current.psi, &step)?,
            params.form,
        )?;
        if next.objective > current.objective + 1e-10 {
            if params.step_halving {
                let mut halvings = 0;
                while next.objective > current.objective && halvings < params.max_halvings {
                    halvings += 1;
                    step.dt *= 0.5;
                    next = evaluate(
                        problem,
                        &metric,
                        &transport_step(&current.phi, &current.psi, &step)?,
                        params.form,
                    )?;
                }
            } else {
                warn!(
                    "objective increased from {:.6e} to {:.6e} at iteration {}; consider a smaller step",
                    current.objective,
                    next.objective,
                    k + 1
                );
            }
        }
        dt = step.dt;
        current = next;
    }
    warn!(
        "shape stage hit the iteration cap; returning the best iterate ({})",
        best.1
    );
    Ok(ShapeOutcome {
        phi: best.2,
        best_iteration: best.1,
        history,
        stop: ShapeStop::IterationCap,
    })
}
