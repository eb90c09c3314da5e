//! Level-set representation of the source region and its transport.
//!
//! Sign convention: `phi > 0` inside the source region, `phi < 0` outside,
//! the interface is the zero set. No reinitialization is ever applied.

use std::collections::VecDeque;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_advection_diffusion, assemble_mass, select_quadrature, Velocity};
use crate::grid::{shape_values, ScalarField, VectorField};
use crate::linalg::{NonsymmetricMethod, PdeSolver};

/// Residual target of the implicit transport solve.
const TRANSPORT_TOL: f64 = 1e-12;

/// Level-set function: a nodal field read through its sign.
pub type LevelSet = ScalarField;

/// Pseudo-time stepping of the level-set transport.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportParams {
    /// Backward-Euler step length.
    pub dt: f64,
    /// Diffusion `eps = eps_factor * max_x |psi(x)|`.
    pub eps_factor: f64,
    /// Backward-Euler steps per descent iteration.
    pub steps: usize,
    /// Caps `dt` so the fastest node moves at most `cfl` cell widths.
    pub cfl: Option<f64>,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            dt: 1.0,
            eps_factor: 2e-3,
            steps: 1,
            cfl: None,
        }
    }
}

impl TransportParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("transport step dt must be positive"));
        }
        if !(self.eps_factor >= 0.0) {
            return Err(Error::invalid("eps_factor must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("at least one transport step is required"));
        }
        if let Some(c) = self.cfl {
            if !(c > 0.0) {
                return Err(Error::invalid("cfl must be positive"));
            }
        }
        Ok(())
    }

    /// Step length used for the gradient `psi`.
    pub fn effective_dt(&self, psi: &VectorField) -> f64 {
        let vmax = psi.max_norm();
        match self.cfl {
            Some(c) if vmax > 0.0 => {
                let h = psi.grid().hx().min(psi.grid().hy());
                self.dt.min(c * h / (vmax * self.steps as f64))
            }
            _ => self.dt,
        }
    }
}

/// Maps a relaxed control onto a level set with range `[-0.5, 0.5]`.
///
/// The interface sits at the mid-value between the extreme control values.
pub fn round_to_levelset(f: &ScalarField) -> Result<LevelSet> {
    let (lo, hi) = (f.min(), f.max());
    if !(hi > lo) {
        return Err(Error::DegenerateControl(format!(
            "control is constant ({lo}); no interface can be derived"
        )));
    }
    let span = hi - lo;
    let coeffs = f.coeffs().iter().map(|v| (v - lo) / span - 0.5).collect();
    ScalarField::new(*f.grid(), coeffs)
}

/// One descent move: transports `phi` along `-psi`.
pub fn transport_step(phi: &LevelSet, psi: &VectorField, params: &TransportParams) -> Result<LevelSet> {
    params.validate()?;
    let eps = params.eps_factor * psi.max_norm();
    let velocity = psi.scaled(-1.0);
    let mut out = phi.clone();
    for _ in 0..params.steps {
        out = transport_with(&out, &velocity, eps, params.dt)?;
    }
    Ok(out)
}

/// Backward-Euler step of `phi_t + div(v phi) - eps lap(phi) = 0` with the
/// outflow boundary rule.
///
/// Solves `(M + dt K) phi_new = M phi_old`.
pub fn transport_with(phi: &LevelSet, velocity: &VectorField, eps: f64, dt: f64) -> Result<LevelSet> {
    let grid = *phi.grid();
    if !velocity.grid().same_lattice(&grid) {
        return Err(Error::invalid("velocity and level set live on different grids"));
    }
    if !(eps >= 0.0) || !(dt > 0.0) {
        return Err(Error::invalid(format!(
            "invalid transport step: eps = {eps}, dt = {dt}"
        )));
    }
    let mass = assemble_mass(&grid);
    let k = assemble_advection_diffusion(&grid, eps, Velocity::Nodal(velocity));
    let system = mass.linear_combination(1.0, &k, dt);
    let rhs = mass.apply(phi.coeffs());
    let solver = PdeSolver::for_grid(system, &grid, NonsymmetricMethod::Direct, TRANSPORT_TOL)?;
    let (coeffs, _) = solver.solve(&rhs)?;
    debug!(
        "transport: eps = {eps:.3e}, dt = {dt}, max |v| = {:.3e}",
        velocity.max_norm()
    );
    ScalarField::new(grid, coeffs)
}

/// Connected components (4-neighbour) of the cells with a positive nodal value.
pub fn count_components(phi: &LevelSet) -> usize {
    let grid = phi.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let inside: Vec<bool> = (0..grid.num_cells())
        .map(|c| phi.cell_values(c).iter().any(|&v| v > 0.0))
        .collect();
    let mut seen = vec![false; inside.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..inside.len() {
        if !inside[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            let (i, j) = grid.cell_ij(c);
            let mut neighbours = [None; 4];
            if i > 0 {
                neighbours[0] = Some(grid.cell_index(i - 1, j));
            }
            if i + 1 < nx {
                neighbours[1] = Some(grid.cell_index(i + 1, j));
            }
            if j > 0 {
                neighbours[2] = Some(grid.cell_index(i, j - 1));
            }
            if j + 1 < ny {
                neighbours[3] = Some(grid.cell_index(i, j + 1));
            }
            for n in neighbours.into_iter().flatten() {
                if inside[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    count
}

/// Area and centroid of `{phi > 0}` using the cut-cell quadrature.
pub fn positive_region_moments(phi: &LevelSet) -> (f64, [f64; 2]) {
    let grid = phi.grid();
    let area = grid.cell_area();
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut m0 = 0.0;
    let mut m1 = [0.0; 2];
    for cell in 0..grid.num_cells() {
        let vals = phi.cell_values(cell);
        if vals.iter().all(|&v| v <= 0.0) {
            continue;
        }
        let [x0, y0] = grid.cell_origin(cell);
        for ([xi, eta], w) in select_quadrature(&vals).iter() {
            let n = shape_values(xi, eta);
            let v: f64 = (0..4).map(|a| n[a] * vals[a]).sum();
            if v > 0.0 {
                let wa = w * area;
                m0 += wa;
                m1[0] += wa * (x0 + xi * hx);
                m1[1] += wa * (y0 + eta * hy);
            }
        }
    }
    if m0 > 0.0 {
        (m0, [m1[0] / m0, m1[1] / m0])
    } else {
        (0.0, [f64::NAN, f64::NAN])
    }
}
