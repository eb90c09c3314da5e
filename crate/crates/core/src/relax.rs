//! Relaxed control problem `0 <= f <= 1` solved by a primal-dual active-set
//! (semismooth Newton) iteration.
//!
//! The reduced functional is
//! `J(f) = 1/2 (u - ub)^T Mm (u - ub) + mu/2 f^T M f` with `S u = M f`.
//! Each Newton step solves the symmetric saddle system
//!
//! ```text
//! [ H    P^T ] [ df  ]     [ g + lambda                   ]
//! [ P    0   ] [ dlA ] = - [ P+ (f - 1) + P- (f - 0)       ]
//! ```
//!
//! with MINRES, where `P` restricts to the active indices and `H` is applied
//! through one state and one adjoint solve.

use std::collections::HashSet;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    assemble_mass, assemble_measurement_mass, assemble_state_operator, MeasurementMask, ModelCoefficients,
    SparseOperator,
};
use crate::grid::{ScalarField, StructuredGrid};
use crate::linalg::{dot, minres, norm, LinearOperator, MinresOptions, NonsymmetricMethod, PdeSolver, SolverReport};

pub const LOWER_BOUND: f64 = 0.0;
pub const UPPER_BOUND: f64 = 1.0;

/// Parameters of the semismooth Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxParams {
    /// Regularization weight `mu`.
    pub mu: f64,
    /// Active-set parameter `gamma`.
    pub gamma: f64,
    /// Newton stopping tolerance on `||(df, dlA)||`; also the MINRES tolerance.
    pub tol: f64,
    pub max_newton: usize,
    /// Start MINRES from the previous step instead of zero.
    pub warm_start: bool,
    /// MINRES iteration cap; `None` means ten times the system size.
    pub max_minres: Option<usize>,
}

impl Default for RelaxParams {
    fn default() -> Self {
        Self {
            mu: 5e-2,
            gamma: 20.0,
            tol: 1e-12,
            max_newton: 50,
            warm_start: false,
            max_minres: None,
        }
    }
}

impl RelaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::invalid("regularization weight mu must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("active-set parameter gamma must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("Newton tolerance must be positive"));
        }
        if self.max_newton == 0 {
            return Err(Error::invalid("Newton iteration cap must be at least 1"));
        }
        Ok(())
    }
}

/// Discrete reduced problem on one grid.
#[derive(Debug)]
pub struct ReducedProblem {
    grid: StructuredGrid,
    solver: PdeSolver,
    mass: SparseOperator,
    meas_mass: SparseOperator,
    target: ScalarField,
    /// `Mm * ub`, cached.
    meas_target: Vec<f64>,
    mu: f64,
}

impl ReducedProblem {
    pub fn new(
        coeffs: &ModelCoefficients,
        mask: &MeasurementMask,
        target: ScalarField,
        mu: f64,
        method: NonsymmetricMethod,
    ) -> Result<Self> {
        let grid = *target.grid();
        coeffs.validate()?;
        let s = assemble_state_operator(&grid, coeffs);
        let solver = PdeSolver::for_grid(s, &grid, method, 1e-12)?;
        let meas_mass = assemble_measurement_mass(&grid, mask)?;
        Self::from_parts(solver, assemble_mass(&grid), meas_mass, target, mu)
    }

    /// Builds the problem from preassembled operators.
    pub fn from_parts(
        solver: PdeSolver,
        mass: SparseOperator,
        meas_mass: SparseOperator,
        target: ScalarField,
        mu: f64,
    ) -> Result<Self> {
        let grid = *target.grid();
        let n = grid.num_nodes();
        if solver.dim() != n || mass.rows() != n || meas_mass.rows() != n {
            return Err(Error::invalid("operator dimensions do not match the measurement grid"));
        }
        if !(mu > 0.0) {
            return Err(Error::invalid("regularization weight mu must be positive"));
        }
        let meas_target = meas_mass.apply(target.coeffs());
        Ok(Self {
            grid,
            solver,
            mass,
            meas_mass,
            target,
            meas_target,
            mu,
        })
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.num_nodes()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn solver(&self) -> &PdeSolver {
        &self.solver
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn measurement_mass(&self) -> &SparseOperator {
        &self.meas_mass
    }

    pub fn target(&self) -> &ScalarField {
        &self.target
    }

    /// PDE solves performed so far (state and adjoint).
    pub fn pde_solves(&self) -> usize {
        self.solver.solve_count()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector has length {}, problem has {} nodes",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// State `u = S^{-1} M f`.
    pub fn state(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f)?;
        Ok(self.solver.solve(&self.mass.apply(f))?.0)
    }

    /// `1/2 (u - ub)^T Mm (u - ub)` for a given state.
    pub fn misfit_of_state(&self, u: &[f64]) -> f64 {
        let r: Vec<f64> = u.iter().zip(self.target.coeffs()).map(|(a, b)| a - b).collect();
        0.5 * dot(&r, &self.meas_mass.apply(&r))
    }

    /// Data misfit without the regularization term.
    pub fn misfit(&self, f: &[f64]) -> Result<f64> {
        Ok(self.misfit_of_state(&self.state(f)?))
    }
}

fn field_coeffs<'a>(p: &ReducedProblem, f: &'a ScalarField) -> Result<&'a [f64]> {
    if !f.grid().same_lattice(p.grid()) {
        return Err(Error::invalid("control lives on a different grid than the problem"));
    }
    Ok(f.coeffs())
}

/// Reduced objective `J(f)`.
pub fn reduced_objective(p: &ReducedProblem, f: &ScalarField) -> Result<f64> {
    let f = field_coeffs(p, f)?;
    let misfit = p.misfit(f)?;
    Ok(misfit + 0.5 * p.mu * dot(f, &p.mass.apply(f)))
}

/// Reduced gradient `M S^{-T} Mm (u - ub) + mu M f`.
pub fn reduced_gradient(p: &ReducedProblem, f: &ScalarField) -> Result<Vec<f64>> {
    gradient_coeffs(p, field_coeffs(p, f)?)
}

fn gradient_coeffs(p: &ReducedProblem, f: &[f64]) -> Result<Vec<f64>> {
    let u = p.state(f)?;
    let mut rhs = p.meas_mass.apply(&u);
    for (r, t) in rhs.iter_mut().zip(&p.meas_target) {
        *r -= t;
    }
    let (pa, _) = p.solver.solve_transpose(&rhs)?;
    let mf = p.mass.apply(f);
    let mut g = p.mass.apply(&pa);
    for (gi, m) in g.iter_mut().zip(&mf) {
        *gi += p.mu * m;
    }
    Ok(g)
}

/// Hessian-vector product `(M S^{-T} Mm S^{-1} M + mu M) v`; two PDE solves.
pub fn hessian_apply(p: &ReducedProblem, v: &[f64]) -> Result<Vec<f64>> {
    p.check_len(v)?;
    let mut out = vec![0.0; v.len()];
    hessian_apply_into(p, v, &mut out)?;
    Ok(out)
}

fn hessian_apply_into(p: &ReducedProblem, v: &[f64], out: &mut [f64]) -> Result<()> {
    let mv = p.mass.apply(v);
    let (z, _) = p.solver.solve(&mv)?;
    let (y, _) = p.solver.solve_transpose(&p.meas_mass.apply(&z))?;
    p.mass.apply_into(&y, out);
    for (o, m) in out.iter_mut().zip(&mv) {
        *o += p.mu * m;
    }
    Ok(())
}

/// Control iterate, multiplier and the active-set partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetState {
    pub f: ScalarField,
    pub lambda: Vec<f64>,
    /// Indices at the upper bound.
    pub upper: Vec<usize>,
    /// Indices at the lower bound.
    pub lower: Vec<usize>,
    pub gamma: f64,
}

impl ActiveSetState {
    /// Fresh state with zero multiplier and empty active sets.
    pub fn new(f: ScalarField, gamma: f64) -> Self {
        let n = f.coeffs().len();
        Self {
            f,
            lambda: vec![0.0; n],
            upper: Vec::new(),
            lower: Vec::new(),
            gamma,
        }
    }

    /// Sorted union of both active sets.
    pub fn active(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.upper.iter().chain(&self.lower).copied().collect();
        a.sort_unstable();
        a
    }

    pub fn inactive(&self) -> Vec<usize> {
        let active: HashSet<usize> = self.upper.iter().chain(&self.lower).copied().collect();
        (0..self.lambda.len()).filter(|j| !active.contains(j)).collect()
    }

    /// Same partition as `other`.
    pub fn same_sets(&self, other: &ActiveSetState) -> bool {
        self.upper == other.upper && self.lower == other.lower
    }
}

/// Re-evaluates the upper and lower active sets from `(f, lambda)`.
pub fn update_active_sets(state: &ActiveSetState) -> ActiveSetState {
    let f = state.f.coeffs();
    let g = state.gamma;
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for (j, (&fj, &lj)) in f.iter().zip(&state.lambda).enumerate() {
        let up = lj + g * (fj - UPPER_BOUND) > 0.0;
        let low = lj + g * (fj - LOWER_BOUND) < 0.0;
        // both at once would need lambda + g f < 0 < lambda + g (f - 1), impossible for g > 0
        assert!(!(up && low), "node {j} is active at both bounds");
        if up {
            upper.push(j);
        } else if low {
            lower.push(j);
        }
    }
    ActiveSetState {
        f: state.f.clone(),
        lambda: state.lambda.clone(),
        upper,
        lower,
        gamma: g,
    }
}

/// The saddle-point operator `[[H, P^T], [P, 0]]` applied matrix-free.
pub struct KktOperator<'a> {
    problem: &'a ReducedProblem,
    active: Vec<usize>,
}

impl<'a> KktOperator<'a> {
    pub fn new(problem: &'a ReducedProblem, active: Vec<usize>) -> Self {
        Self { problem, active }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }
}

impl LinearOperator for KktOperator<'_> {
    fn dim(&self) -> usize {
        self.problem.dim() + self.active.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.problem.dim();
        let (xf, xl) = x.split_at(n);
        let (yf, yl) = y.split_at_mut(n);
        hessian_apply_into(self.problem, xf, yf)?;
        for (k, &j) in self.active.iter().enumerate() {
            yf[j] += xl[k];
            yl[k] = xf[j];
        }
        Ok(())
    }
}

/// Newton increment for the primal variable and the active multipliers.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub delta_f: Vec<f64>,
    /// Increment of `lambda` on the sorted active set.
    pub delta_lambda: Vec<f64>,
    pub active: Vec<usize>,
    pub report: SolverReport,
}

impl NewtonStep {
    pub fn norm(&self) -> f64 {
        step_norm(&self.delta_f, &self.delta_lambda)
    }
}

/// Right-hand side of the saddle system (already negated).
pub fn kkt_rhs(p: &ReducedProblem, state: &ActiveSetState) -> Result<(Vec<usize>, Vec<f64>)> {
    let f = field_coeffs(p, &state.f)?;
    let active = state.active();
    let grad = gradient_coeffs(p, f)?;
    let n = p.dim();
    let mut rhs = Vec::with_capacity(n + active.len());
    rhs.extend(grad.iter().zip(&state.lambda).map(|(g, l)| -(g + l)));
    let upper: HashSet<usize> = state.upper.iter().copied().collect();
    for &j in &active {
        let bound = if upper.contains(&j) { UPPER_BOUND } else { LOWER_BOUND };
        rhs.push(-(f[j] - bound));
    }
    Ok((active, rhs))
}

/// Solves the saddle system for the current active sets.
pub fn newton_step(p: &ReducedProblem, state: &ActiveSetState, params: &RelaxParams) -> Result<NewtonStep> {
    newton_step_from(p, state, params, None)
}

fn newton_step_from(
    p: &ReducedProblem,
    state: &ActiveSetState,
    params: &RelaxParams,
    guess: Option<Vec<f64>>,
) -> Result<NewtonStep> {
    let (active, rhs) = kkt_rhs(p, state)?;
    let op = KktOperator::new(p, active);
    let opts = MinresOptions {
        max_iters: params.max_minres,
        symmetry_check: None,
        initial_guess: guess.filter(|g| g.len() == rhs.len()),
    };
    let (x, report) = minres(&op, &rhs, params.tol, &opts)?;
    let n = p.dim();
    Ok(NewtonStep {
        delta_f: x[..n].to_vec(),
        delta_lambda: x[n..].to_vec(),
        active: op.active,
        report,
    })
}

/// One row of the Newton convergence history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonRecord {
    pub iteration: usize,
    /// Objective before the step.
    pub objective: f64,
    /// `||(df, dlA)||_2`.
    pub step_norm: f64,
    pub minres_iterations: usize,
    pub upper: usize,
    pub lower: usize,
    /// Cumulative PDE solves after the step.
    pub pde_solves: usize,
}

#[derive(Debug, Clone)]
pub struct RelaxOutcome {
    pub f: ScalarField,
    pub lambda: Vec<f64>,
    /// Active sets used in the final step.
    pub state: ActiveSetState,
    pub history: Vec<NewtonRecord>,
    pub converged: bool,
}

/// Runs the primal-dual active-set iteration from `f0`.
///
/// Fails with [`Error::NotConverged`] (carrying the step-norm history) when
/// the iteration cap is reached.
pub fn solve_relaxed(p: &ReducedProblem, f0: &ScalarField, params: &RelaxParams) -> Result<RelaxOutcome> {
    params.validate()?;
    field_coeffs(p, f0)?;
    let mut state = ActiveSetState::new(f0.clone(), params.gamma);
    let mut history = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    for k in 0..params.max_newton {
        state = update_active_sets(&state);
        let objective = reduced_objective(p, &state.f)?;
        let guess = if params.warm_start { previous.take() } else { None };
        let step = newton_step_from(p, &state, params, guess)?;
        let step_norm = step.norm();
        {
            let f = state.f.coeffs_mut();
            for (fi, d) in f.iter_mut().zip(&step.delta_f) {
                *fi += d;
            }
        }
        let mut lambda = vec![0.0; state.lambda.len()];
        for (k, &j) in step.active.iter().enumerate() {
            lambda[j] = state.lambda[j] + step.delta_lambda[k];
        }
        state.lambda = lambda;
        let record = NewtonRecord {
            iteration: k,
            objective,
            step_norm,
            minres_iterations: step.report.iterations,
            upper: state.upper.len(),
            lower: state.lower.len(),
            pde_solves: p.pde_solves(),
        };
        debug!(
            "newton {k}: J = {objective:.6e}, |step| = {step_norm:.3e}, minres {}, |A+| = {}, |A-| = {}",
            record.minres_iterations, record.upper, record.lower
        );
        if let Some(last) = history.last() {
            let last: &NewtonRecord = last;
            if objective > last.objective + 1e-12 {
                warn!("objective increased from {:.6e} to {objective:.6e}", last.objective);
            }
        }
        history.push(record);
        if params.warm_start {
            let mut x = step.delta_f.clone();
            x.extend(&step.delta_lambda);
            previous = Some(x);
        }
        if step_norm <= params.tol {
            info!("relaxed problem converged after {} Newton steps", k + 1);
            return Ok(RelaxOutcome {
                f: state.f.clone(),
                lambda: state.lambda.clone(),
                state,
                history,
                converged: true,
            });
        }
    }
    let report = SolverReport {
        iterations: history.len(),
        final_residual: history.last().map_or(f64::NAN, |r| r.step_norm),
        converged: false,
        residual_history: history.iter().map(|r| r.step_norm).collect(),
    };
    Err(Error::NotConverged {
        solver: "semismooth-newton",
        report,
    })
}

/// Checks the first-order conditions of a computed solution.
///
/// Returns the largest violation among bound feasibility, the gradient on
/// the inactive set and the bound residual on the active sets.
pub fn kkt_violation(p: &ReducedProblem, outcome: &RelaxOutcome) -> Result<f64> {
    let f = field_coeffs(p, &outcome.f)?;
    let g = gradient_coeffs(p, f)?;
    let state = &outcome.state;
    let mut worst = 0.0_f64;
    for &j in &state.upper {
        worst = worst.max((f[j] - UPPER_BOUND).abs());
    }
    for &j in &state.lower {
        worst = worst.max((f[j] - LOWER_BOUND).abs());
    }
    for j in state.inactive() {
        worst = worst.max(g[j].abs()).max(outcome.lambda[j].abs());
    }
    Ok(worst)
}

/// Uniform starting control.
pub fn initial_control(grid: StructuredGrid) -> ScalarField {
    ScalarField::constant(grid, 0.5 * (LOWER_BOUND + UPPER_BOUND))
}

/// `||(df, dlA)||_2`
pub fn step_norm(delta_f: &[f64], delta_lambda: &[f64]) -> f64 {
    norm(delta_f).hypot(norm(delta_lambda))
}
