//! Global assembly of the bilinear and linear forms on a structured grid.
//!
//! Element matrices are indexed `local[test][trial]`, so a global operator
//! row corresponds to a test function and a column to a trial function.
//! Cell-parallel work produces per-cell contributions in cell order and is
//! then scattered sequentially; results do not depend on the thread count.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask::MeasurementMask;
use super::quadrature::{gauss_legendre_unit, low_order_rule, select_quadrature};
use super::sparse::SparseOperator;
use crate::error::{Error, Result};
use crate::grid::{shape_ref_gradients, shape_values, ScalarField, StructuredGrid, VectorField};

/// Diffusivity and constant transport velocity of the flow model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCoefficients {
    pub c: f64,
    pub b: [f64; 2],
}

impl ModelCoefficients {
    pub fn new(c: f64, b: [f64; 2]) -> Result<Self> {
        let m = Self { c, b };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::invalid(format!("diffusivity must be positive, got {}", self.c)));
        }
        if !self.b.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("velocity must be finite"));
        }
        Ok(())
    }

    /// `|b| h / c` with `h` the larger cell side.
    pub fn cell_peclet(&self, grid: &StructuredGrid) -> f64 {
        self.b[0].hypot(self.b[1]) * grid.hx().max(grid.hy()) / self.c
    }
}

/// Velocity sampled by the advection-diffusion assembly.
#[derive(Debug, Clone, Copy)]
pub enum Velocity<'a> {
    Constant([f64; 2]),
    Nodal(&'a VectorField),
}

impl Velocity<'_> {
    fn in_cell(&self, cell_vel: &Option<[[f64; 2]; 4]>, n: &[f64; 4]) -> [f64; 2] {
        match (self, cell_vel) {
            (Velocity::Constant(b), _) => *b,
            (Velocity::Nodal(_), Some(v)) => {
                let mut out = [0.0; 2];
                for a in 0..4 {
                    out[0] += n[a] * v[a][0];
                    out[1] += n[a] * v[a][1];
                }
                out
            }
            (Velocity::Nodal(_), None) => unreachable!("nodal velocity without cell values"),
        }
    }

    fn cell_values(&self, grid: &StructuredGrid, cell: usize) -> Option<[[f64; 2]; 4]> {
        match self {
            Velocity::Constant(_) => None,
            Velocity::Nodal(v) => Some(grid.cell_nodes(cell).map(|n| v.node_value(n))),
        }
    }

    fn at_node(&self, node: usize) -> [f64; 2] {
        match self {
            Velocity::Constant(b) => *b,
            Velocity::Nodal(v) => v.node_value(node),
        }
    }
}

/// Physical gradients of the four shape functions at a reference point.
#[inline]
pub(crate) fn physical_gradients(grid: &StructuredGrid, xi: f64, eta: f64) -> [[f64; 2]; 4] {
    let (hx, hy) = (grid.hx(), grid.hy());
    shape_ref_gradients(xi, eta).map(|[gx, gy]| [gx / hx, gy / hy])
}

fn uniform_element(
    grid: &StructuredGrid,
    kernel: impl Fn(&[f64; 4], &[[f64; 2]; 4], usize, usize) -> f64,
) -> [[f64; 4]; 4] {
    let area = grid.cell_area();
    let mut local = [[0.0; 4]; 4];
    for ([xi, eta], w) in low_order_rule().iter() {
        let n = shape_values(xi, eta);
        let g = physical_gradients(grid, xi, eta);
        for (a, row) in local.iter_mut().enumerate() {
            for (b, entry) in row.iter_mut().enumerate() {
                *entry += w * area * kernel(&n, &g, a, b);
            }
        }
    }
    local
}

fn assemble_uniform(grid: &StructuredGrid, local: &[[f64; 4]; 4]) -> SparseOperator {
    let mut op = SparseOperator::grid_pattern(grid);
    for cell in 0..grid.num_cells() {
        op.add_element(&grid.cell_nodes(cell), local);
    }
    op
}

/// `M_ij = int phi_i phi_j dx`.
pub fn assemble_mass(grid: &StructuredGrid) -> SparseOperator {
    let local = uniform_element(grid, |n, _, a, b| n[a] * n[b]);
    assemble_uniform(grid, &local)
}

/// `L_ij = int grad phi_i . grad phi_j dx` (pure Neumann Laplacian).
pub fn assemble_laplacian(grid: &StructuredGrid) -> SparseOperator {
    let local = uniform_element(grid, |_, g, a, b| g[a][0] * g[b][0] + g[a][1] * g[b][1]);
    assemble_uniform(grid, &local)
}

/// Mass matrix restricted to the observation region.
///
/// Each patch is intersected with each cell and the basis products are
/// integrated exactly over the intersection.
pub fn assemble_measurement_mass(grid: &StructuredGrid, mask: &MeasurementMask) -> Result<SparseOperator> {
    let patches = match mask {
        MeasurementMask::Full => return Ok(assemble_mass(grid)),
        MeasurementMask::Patches { patches } => patches,
    };
    if patches.is_empty() {
        return Err(Error::invalid("measurement region is empty"));
    }
    let (gx, gw) = gauss_legendre_unit(2);
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut op = SparseOperator::grid_pattern(grid);
    for cell in 0..grid.num_cells() {
        let [ox, oy] = grid.cell_origin(cell);
        let cell_rect = super::mask::Rect {
            x0: ox,
            x1: ox + hx,
            y0: oy,
            y1: oy + hy,
        };
        let mut local = [[0.0; 4]; 4];
        let mut touched = false;
        for patch in patches {
            let Some(sub) = patch.intersection(&cell_rect) else {
                continue;
            };
            touched = true;
            let (xi0, xi1) = ((sub.x0 - ox) / hx, (sub.x1 - ox) / hx);
            let (eta0, eta1) = ((sub.y0 - oy) / hy, (sub.y1 - oy) / hy);
            let jac = (xi1 - xi0) * (eta1 - eta0) * hx * hy;
            for (ty, wy) in gx.iter().zip(&gw) {
                for (tx, wx) in gx.iter().zip(&gw) {
                    let n = shape_values(xi0 + tx * (xi1 - xi0), eta0 + ty * (eta1 - eta0));
                    for a in 0..4 {
                        for b in 0..4 {
                            local[a][b] += wx * wy * jac * n[a] * n[b];
                        }
                    }
                }
            }
        }
        if touched {
            op.add_element(&grid.cell_nodes(cell), &local);
        }
    }
    Ok(op)
}

/// Advection-diffusion form
/// `int k grad p_j . grad p_i - p_j v . grad p_i dx + int g p_j p_i ds`,
/// `g = max(0, v . n)`, with test index `i` as row.
pub fn assemble_advection_diffusion(grid: &StructuredGrid, diffusivity: f64, velocity: Velocity<'_>) -> SparseOperator {
    let area = grid.cell_area();
    let rule = low_order_rule();
    let element = |cell: usize| -> [[f64; 4]; 4] {
        let cell_vel = velocity.cell_values(grid, cell);
        let mut local = [[0.0; 4]; 4];
        for ([xi, eta], w) in rule.iter() {
            let n = shape_values(xi, eta);
            let g = physical_gradients(grid, xi, eta);
            let v = velocity.in_cell(&cell_vel, &n);
            for a in 0..4 {
                let v_grad_a = v[0] * g[a][0] + v[1] * g[a][1];
                for b in 0..4 {
                    let diff = diffusivity * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                    local[a][b] += w * area * (diff - n[b] * v_grad_a);
                }
            }
        }
        local
    };
    let elements: Vec<[[f64; 4]; 4]> = match velocity {
        Velocity::Constant(_) => {
            let local = element(0);
            vec![local; grid.num_cells()]
        }
        Velocity::Nodal(_) => (0..grid.num_cells()).into_par_iter().map(element).collect(),
    };
    let mut op = SparseOperator::grid_pattern(grid);
    for (cell, local) in elements.iter().enumerate() {
        op.add_element(&grid.cell_nodes(cell), local);
    }
    add_outflow_boundary(grid, velocity, &mut op);
    op
}

/// Adds `int max(0, v . n) p_j p_i ds` over the domain boundary.
fn add_outflow_boundary(grid: &StructuredGrid, velocity: Velocity<'_>, op: &mut SparseOperator) {
    let (tq, wq) = gauss_legendre_unit(3);
    for facet in grid.boundary_facets() {
        let [p, q] = facet.nodes;
        let (vp, vq) = (velocity.at_node(p), velocity.at_node(q));
        let mut local = [[0.0; 2]; 2];
        for (t, w) in tq.iter().zip(&wq) {
            let n = [1.0 - t, *t];
            let v = [n[0] * vp[0] + n[1] * vq[0], n[0] * vp[1] + n[1] * vq[1]];
            let g = (v[0] * facet.normal[0] + v[1] * facet.normal[1]).max(0.0);
            if g == 0.0 {
                continue;
            }
            for a in 0..2 {
                for b in 0..2 {
                    local[a][b] += w * facet.length * g * n[a] * n[b];
                }
            }
        }
        for (a, &ra) in [p, q].iter().enumerate() {
            for (b, &cb) in [p, q].iter().enumerate() {
                if local[a][b] != 0.0 {
                    op.add(ra, cb, local[a][b]);
                }
            }
        }
    }
}

/// State operator `S` of the stationary advection-diffusion model.
pub fn assemble_state_operator(grid: &StructuredGrid, coeffs: &ModelCoefficients) -> SparseOperator {
    let pe = coeffs.cell_peclet(grid);
    if pe > 2.0 {
        warn!(
            "cell Peclet number {pe:.2} exceeds 2 on the {}x{} grid; the Galerkin state may oscillate",
            grid.nx(),
            grid.ny()
        );
    }
    assemble_advection_diffusion(grid, coeffs.c, Velocity::Constant(coeffs.b))
}

/// Adjoint operator `S^T`.
pub fn assemble_adjoint_operator(grid: &StructuredGrid, coeffs: &ModelCoefficients) -> SparseOperator {
    assemble_state_operator(grid, coeffs).transpose()
}

/// `l_i = int chi{phi > 0} weight phi_i dx` with cut-cell quadrature.
///
/// `weight = None` means the constant 1.
pub fn assemble_source_load(
    grid: &StructuredGrid,
    phi: &ScalarField,
    weight: Option<&ScalarField>,
) -> Result<Vec<f64>> {
    if phi.grid() != grid && !phi.grid().same_lattice(grid) {
        return Err(Error::invalid("level set lives on a different grid"));
    }
    if let Some(w) = weight {
        if !w.grid().same_lattice(grid) {
            return Err(Error::invalid("weight field lives on a different grid"));
        }
    }
    let area = grid.cell_area();
    let per_cell: Vec<[f64; 4]> = (0..grid.num_cells())
        .into_par_iter()
        .map(|cell| {
            let vals = phi.cell_values(cell);
            let mut local = [0.0; 4];
            if vals.iter().all(|&v| v <= 0.0) {
                return local;
            }
            let wvals = weight.map(|w| w.cell_values(cell));
            for ([xi, eta], w) in select_quadrature(&vals).iter() {
                let n = shape_values(xi, eta);
                let phi_q: f64 = (0..4).map(|a| n[a] * vals[a]).sum();
                if phi_q <= 0.0 {
                    continue;
                }
                let wq = wvals.map_or(1.0, |wv| (0..4).map(|a| n[a] * wv[a]).sum());
                for a in 0..4 {
                    local[a] += w * area * wq * n[a];
                }
            }
            local
        })
        .collect();
    let mut load = vec![0.0; grid.num_nodes()];
    for (cell, local) in per_cell.iter().enumerate() {
        for (a, node) in grid.cell_nodes(cell).into_iter().enumerate() {
            load[node] += local[a];
        }
    }
    Ok(load)
}

/// Volumetric source vector `M f`, assembled cell by cell.
pub fn assemble_relaxed_load(grid: &StructuredGrid, f: &ScalarField) -> Result<Vec<f64>> {
    if !f.grid().same_lattice(grid) {
        return Err(Error::invalid("control lives on a different grid"));
    }
    let local = uniform_element(grid, |n, _, a, b| n[a] * n[b]);
    let mut load = vec![0.0; grid.num_nodes()];
    for cell in 0..grid.num_cells() {
        let nodes = grid.cell_nodes(cell);
        let vals = f.cell_values(cell);
        for a in 0..4 {
            load[nodes[a]] += (0..4).map(|b| local[a][b] * vals[b]).sum::<f64>();
        }
    }
    Ok(load)
}
