//! Structured rectangular meshes of bilinear quadrilateral cells.
//!
//! Nodes are numbered lexicographically with x running fastest, so node
//! `(i, j)` has index `j * (nx + 1) + i`. Cell `(i, j)` spans nodes
//! `(i, j)`, `(i + 1, j)`, `(i, j + 1)`, `(i + 1, j + 1)`, stored in that
//! order (SW, SE, NW, NE) wherever a cell's nodal values are passed around.
//!
//! Grids are nested by factor-2 refinement: the child of a grid has twice as
//! many cells per axis and contains every parent node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredGrid {
    lx: f64,
    ly: f64,
    nx: usize,
    ny: usize,
    level: u32,
}

/// One edge of the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFacet {
    pub nodes: [usize; 2],
    pub normal: [f64; 2],
    pub length: f64,
}

/// Builds `[0, lx] x [0, ly]` split into `nx x ny` equal cells.
pub fn build_grid(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<StructuredGrid> {
    StructuredGrid::new(lx, ly, nx, ny)
}

/// Factor-2 refinement in both axes.
pub fn refine(grid: &StructuredGrid) -> StructuredGrid {
    grid.refined()
}

impl StructuredGrid {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(lx.is_finite() && lx > 0.0 && ly.is_finite() && ly > 0.0) {
            return Err(Error::invalid(format!(
                "domain extents must be positive, got {lx} x {ly}"
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::invalid(format!(
                "cell counts must be at least 1, got {nx} x {ny}"
            )));
        }
        Ok(Self {
            lx,
            ly,
            nx,
            ny,
            level: 0,
        })
    }

    /// Restores a grid with an explicit level index (used by file readers).
    pub fn with_level(mut self, level: u32) -> Self {
        self.level = level;
        self
    }

    pub fn refined(&self) -> Self {
        Self {
            nx: 2 * self.nx,
            ny: 2 * self.ny,
            level: self.level + 1,
            ..*self
        }
    }

    /// Applies `times` factor-2 refinements.
    pub fn refined_times(&self, times: u32) -> Self {
        (0..times).fold(*self, |g, _| g.refined())
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn ly(&self) -> f64 {
        self.ly
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }
    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// `(i, j)` lattice position of a node.
    #[inline]
    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    /// Node x coordinate; `lx * i / nx` so that nested grids agree bit for bit.
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.lx * i as f64 / self.nx as f64
    }
    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.ly * j as f64 / self.ny as f64
    }

    pub fn node_coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(node);
        [self.x(i), self.y(j)]
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn cell_ij(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    /// Nodes of a cell in SW, SE, NW, NE order.
    #[inline]
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        let (i, j) = self.cell_ij(cell);
        let sw = self.node_index(i, j);
        let nw = self.node_index(i, j + 1);
        [sw, sw + 1, nw, nw + 1]
    }

    /// Lower-left corner of a cell.
    pub fn cell_origin(&self, cell: usize) -> [f64; 2] {
        let (i, j) = self.cell_ij(cell);
        [self.x(i), self.y(j)]
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (i, j) = self.cell_ij(cell);
        [
            self.lx * (2 * i + 1) as f64 / (2 * self.nx) as f64,
            self.ly * (2 * j + 1) as f64 / (2 * self.ny) as f64,
        ]
    }

    /// Locates the cell containing `p` and the reference coordinates of `p`
    /// inside it. Points on the domain boundary map into the adjacent cell.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 2])> {
        let tol = 1e-12 * self.lx.max(self.ly);
        if p[0] < -tol || p[0] > self.lx + tol || p[1] < -tol || p[1] > self.ly + tol {
            return None;
        }
        let sx = (p[0] / self.hx()).clamp(0.0, self.nx as f64);
        let sy = (p[1] / self.hy()).clamp(0.0, self.ny as f64);
        let i = (sx.floor() as usize).min(self.nx - 1);
        let j = (sy.floor() as usize).min(self.ny - 1);
        Some((self.cell_index(i, j), [sx - i as f64, sy - j as f64]))
    }

    /// Boundary edges in the order bottom, right, top, left.
    pub fn boundary_facets(&self) -> Vec<BoundaryFacet> {
        let mut facets = Vec::with_capacity(2 * (self.nx + self.ny));
        let (hx, hy) = (self.hx(), self.hy());
        for i in 0..self.nx {
            facets.push(BoundaryFacet {
                nodes: [self.node_index(i, 0), self.node_index(i + 1, 0)],
                normal: [0.0, -1.0],
                length: hx,
            });
        }
        for j in 0..self.ny {
            facets.push(BoundaryFacet {
                nodes: [self.node_index(self.nx, j), self.node_index(self.nx, j + 1)],
                normal: [1.0, 0.0],
                length: hy,
            });
        }
        for i in 0..self.nx {
            facets.push(BoundaryFacet {
                nodes: [self.node_index(i, self.ny), self.node_index(i + 1, self.ny)],
                normal: [0.0, 1.0],
                length: hx,
            });
        }
        for j in 0..self.ny {
            facets.push(BoundaryFacet {
                nodes: [self.node_index(0, j), self.node_index(0, j + 1)],
                normal: [-1.0, 0.0],
                length: hy,
            });
        }
        facets
    }

    /// Number of factor-2 refinements that turn `coarse` into `self`, if any.
    pub fn refinement_depth_over(&self, coarse: &StructuredGrid) -> Option<u32> {
        if self.lx != coarse.lx || self.ly != coarse.ly {
            return None;
        }
        if self.nx % coarse.nx != 0 || self.ny % coarse.ny != 0 {
            return None;
        }
        let rx = self.nx / coarse.nx;
        let ry = self.ny / coarse.ny;
        if rx != ry || !rx.is_power_of_two() {
            return None;
        }
        Some(rx.trailing_zeros())
    }

    /// Whether nodal values are stored on the same lattice (level ignored).
    pub fn same_lattice(&self, other: &StructuredGrid) -> bool {
        self.lx == other.lx && self.ly == other.ly && self.nx == other.nx && self.ny == other.ny
    }

    /// A node permutation (`perm[new] = old`) that keeps the matrix bandwidth
    /// at `min(nx, ny) + 2`: lexicographic order along the longer axis.
    pub fn bandwidth_ordering(&self) -> Option<Vec<usize>> {
        if self.ny <= self.nx {
            let mut perm = Vec::with_capacity(self.num_nodes());
            for i in 0..=self.nx {
                for j in 0..=self.ny {
                    perm.push(self.node_index(i, j));
                }
            }
            Some(perm)
        } else {
            None
        }
    }
}

/// Bilinear shape functions on the reference square, SW, SE, NW, NE.
#[inline]
pub fn shape_values(xi: f64, eta: f64) -> [f64; 4] {
    [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), (1.0 - xi) * eta, xi * eta]
}

/// Reference-coordinate derivatives `[d/dxi, d/deta]` of the shape functions.
#[inline]
pub fn shape_ref_gradients(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - eta), -(1.0 - xi)],
        [1.0 - eta, -xi],
        [-eta, 1.0 - xi],
        [eta, xi],
    ]
}

/// A nodal field in the bilinear finite element space of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: StructuredGrid,
    coeffs: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: StructuredGrid, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.num_nodes() {
            return Err(Error::invalid(format!(
                "field has {} coefficients, grid has {} nodes",
                coeffs.len(),
                grid.num_nodes()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn constant(grid: StructuredGrid, value: f64) -> Self {
        Self {
            grid,
            coeffs: vec![value; grid.num_nodes()],
        }
    }

    pub fn zeros(grid: StructuredGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f(x, y)` at every node.
    pub fn from_fn(grid: StructuredGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let coeffs = (0..grid.num_nodes())
            .map(|n| {
                let [x, y] = grid.node_coords(n);
                f(x, y)
            })
            .collect();
        Self { grid, coeffs }
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }
    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn cell_values(&self, cell: usize) -> [f64; 4] {
        self.grid.cell_nodes(cell).map(|n| self.coeffs[n])
    }

    /// Bilinear evaluation at reference coordinates of a cell.
    pub fn eval_in_cell(&self, cell: usize, xi: f64, eta: f64) -> f64 {
        let vals = self.cell_values(cell);
        shape_values(xi, eta).iter().zip(vals).map(|(n, v)| n * v).sum()
    }

    /// Point evaluation; `None` outside the domain.
    pub fn eval(&self, p: [f64; 2]) -> Option<f64> {
        self.grid
            .locate(p)
            .map(|(cell, [xi, eta])| self.eval_in_cell(cell, xi, eta))
    }

    pub fn min(&self) -> f64 {
        self.coeffs.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.coeffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A 2-vector field whose components share one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: [ScalarField; 2],
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        if x.grid() != y.grid() {
            return Err(Error::invalid("vector field components live on different grids"));
        }
        Ok(Self { components: [x, y] })
    }

    pub fn zeros(grid: StructuredGrid) -> Self {
        Self {
            components: [ScalarField::zeros(grid), ScalarField::zeros(grid)],
        }
    }

    /// Uniform vector `v` at every node.
    pub fn constant(grid: StructuredGrid, v: [f64; 2]) -> Self {
        Self {
            components: [ScalarField::constant(grid, v[0]), ScalarField::constant(grid, v[1])],
        }
    }

    /// Splits a component-major vector `[x-values..., y-values...]`.
    pub fn from_stacked(grid: StructuredGrid, stacked: &[f64]) -> Result<Self> {
        let n = grid.num_nodes();
        if stacked.len() != 2 * n {
            return Err(Error::invalid(format!(
                "stacked vector has length {}, expected {}",
                stacked.len(),
                2 * n
            )));
        }
        Ok(Self {
            components: [
                ScalarField::new(grid, stacked[..n].to_vec())?,
                ScalarField::new(grid, stacked[n..].to_vec())?,
            ],
        })
    }

    pub fn grid(&self) -> &StructuredGrid {
        self.components[0].grid()
    }
    pub fn component(&self, k: usize) -> &ScalarField {
        &self.components[k]
    }
    pub fn components(&self) -> &[ScalarField; 2] {
        &self.components
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut out = self.components[0].coeffs().to_vec();
        out.extend_from_slice(self.components[1].coeffs());
        out
    }

    pub fn node_value(&self, node: usize) -> [f64; 2] {
        [self.components[0].coeffs()[node], self.components[1].coeffs()[node]]
    }

    /// Largest nodal Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid().num_nodes())
            .map(|n| {
                let [a, b] = self.node_value(n);
                a.hypot(b)
            })
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let scale = |f: &ScalarField| {
            ScalarField::new(*f.grid(), f.coeffs().iter().map(|v| s * v).collect()).expect("same length")
        };
        Self {
            components: [scale(&self.components[0]), scale(&self.components[1])],
        }
    }
}

/// Interpolates a field onto a (possibly multi-step) refinement of its grid.
pub fn prolongate(field: &ScalarField, fine: &StructuredGrid) -> Result<ScalarField> {
    let coarse = field.grid();
    let depth = fine.refinement_depth_over(coarse).ok_or_else(|| {
        Error::invalid(format!(
            "target grid {}x{} is not a nested refinement of {}x{}",
            fine.nx, fine.ny, coarse.nx, coarse.ny
        ))
    })?;
    let r = 1usize << depth;
    let inv_r = 1.0 / r as f64;
    let mut coeffs = Vec::with_capacity(fine.num_nodes());
    for jf in 0..=fine.ny {
        let jc = (jf / r).min(coarse.ny - 1);
        let eta = (jf - jc * r) as f64 * inv_r;
        for if_ in 0..=fine.nx {
            let ic = (if_ / r).min(coarse.nx - 1);
            let xi = (if_ - ic * r) as f64 * inv_r;
            let cell = coarse.cell_index(ic, jc);
            coeffs.push(field.eval_in_cell(cell, xi, eta));
        }
    }
    ScalarField::new(*fine, coeffs)
}

/// Samples a fine field at the nodes it shares with a coarser nested grid.
pub fn inject(field: &ScalarField, coarse: &StructuredGrid) -> Result<ScalarField> {
    let fine = field.grid();
    let depth = fine
        .refinement_depth_over(coarse)
        .ok_or_else(|| Error::invalid("grids are not nested"))?;
    let r = 1usize << depth;
    let mut coeffs = Vec::with_capacity(coarse.num_nodes());
    for j in 0..=coarse.ny {
        for i in 0..=coarse.nx {
            coeffs.push(field.coeffs[fine.node_index(i * r, j * r)]);
        }
    }
    ScalarField::new(*coarse, coeffs)
}

/// One level of full-weighting restriction.
///
/// Interior nodes use the tensor stencil `[1/4, 1/2, 1/4]` per axis; along an
/// axis where the coarse node sits on the boundary the stencil degenerates to
/// injection. Weights are convex and reproduce bilinear functions exactly.
fn full_weighting_once(field: &ScalarField) -> ScalarField {
    let fine = field.grid();
    let nx = fine.nx / 2;
    let ny = fine.ny / 2;
    let coarse = StructuredGrid {
        nx,
        ny,
        level: fine.level.saturating_sub(1),
        ..*fine
    };
    let stencil = |c: usize, n: usize| -> Vec<(usize, f64)> {
        if c == 0 || c == n {
            vec![(2 * c, 1.0)]
        } else {
            vec![(2 * c - 1, 0.25), (2 * c, 0.5), (2 * c + 1, 0.25)]
        }
    };
    let mut coeffs = Vec::with_capacity(coarse.num_nodes());
    for j in 0..=ny {
        let sy = stencil(j, ny);
        for i in 0..=nx {
            let sx = stencil(i, nx);
            let mut acc = 0.0;
            for &(jf, wy) in &sy {
                for &(if_, wx) in &sx {
                    acc += wx * wy * field.coeffs[fine.node_index(if_, jf)];
                }
            }
            coeffs.push(acc);
        }
    }
    ScalarField { grid: coarse, coeffs }
}

/// Full-weighting restriction from a nested refinement down to `coarse`.
pub fn restrict_full_weighting(field: &ScalarField, coarse: &StructuredGrid) -> Result<ScalarField> {
    let depth = field.grid().refinement_depth_over(coarse).ok_or_else(|| {
        Error::invalid(format!(
            "field grid {}x{} is not a nested refinement of {}x{}",
            field.grid().nx,
            field.grid().ny,
            coarse.nx,
            coarse.ny
        ))
    })?;
    let mut current = field.clone();
    for _ in 0..depth {
        current = full_weighting_once(&current);
    }
    current.grid = *coarse;
    Ok(current)
}
