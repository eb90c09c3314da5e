//! Synthetic problems: inclusion geometries, forward data, noise and sensors.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_source_load, assemble_state_operator, MeasurementMask, ModelCoefficients, Rect};
use crate::grid::{restrict_full_weighting, ScalarField, StructuredGrid};
use crate::levelset::LevelSet;
use crate::linalg::{NonsymmetricMethod, PdeSolver};

/// Building block of an inclusion geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Primitive {
    pub fn contains(&self, [x, y]: [f64; 2]) -> bool {
        match *self {
            Primitive::Rect { x0, x1, y0, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Primitive::Circle { cx, cy, r } => (x - cx).hypot(y - cy) <= r,
        }
    }

    fn bounds(&self) -> [f64; 4] {
        match *self {
            Primitive::Rect { x0, x1, y0, y1 } => [x0, x1, y0, y1],
            Primitive::Circle { cx, cy, r } => [cx - r, cx + r, cy - r, cy + r],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Rect { x0, x1, y0, y1 } => x0 < x1 && y0 < y1,
            Primitive::Circle { r, .. } => r > 0.0,
        };
        if !ok || !self.bounds().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("degenerate primitive {self:?}")));
        }
        Ok(())
    }
}

/// Union of primitives marking the source region.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionGeometry {
    pub primitives: Vec<Primitive>,
}

impl InclusionGeometry {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    /// Rectangle `[0.4, 0.9] x [0.25, 0.55]` and a circle of radius 0.2 at
    /// `(1.6, 0.65)`, sized for the domain `[0, 3] x [0, 1]`.
    pub fn two_inclusions() -> Self {
        Self::new(vec![
            Primitive::Rect {
                x0: 0.4,
                x1: 0.9,
                y0: 0.25,
                y1: 0.55,
            },
            Primitive::Circle {
                cx: 1.6,
                cy: 0.65,
                r: 0.2,
            },
        ])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.primitives.iter().any(|q| q.contains(p))
    }

    /// Checks every primitive lies inside the grid's domain.
    pub fn validate(&self, grid: &StructuredGrid) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
            let [x0, x1, y0, y1] = p.bounds();
            if x0 < 0.0 || y0 < 0.0 || x1 > grid.lx() || y1 > grid.ly() {
                return Err(Error::invalid(format!("primitive {p:?} leaves the domain")));
            }
        }
        Ok(())
    }
}

/// Nodal tagging: `+0.5` at nodes inside the geometry, `-0.5` elsewhere.
pub fn indicator_levelset(geom: &InclusionGeometry, grid: &StructuredGrid) -> LevelSet {
    let coeffs = (0..grid.num_nodes())
        .map(|n| if geom.contains(grid.node_coords(n)) { 0.5 } else { -0.5 })
        .collect();
    ScalarField::new(*grid, coeffs).expect("length matches node count")
}

/// Additive Gaussian noise with standard deviation `level * max |u|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub seed: u64,
    pub level: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { seed: 0, level: 0.0 }
    }
}

/// Noise-free state generated by the true source region.
pub fn reference_state(
    geom: &InclusionGeometry,
    grid: &StructuredGrid,
    coeffs: &ModelCoefficients,
) -> Result<ScalarField> {
    geom.validate(grid)?;
    coeffs.validate()?;
    let phi = indicator_levelset(geom, grid);
    let load = assemble_source_load(grid, &phi, None)?;
    let solver = PdeSolver::for_grid(
        assemble_state_operator(grid, coeffs),
        grid,
        NonsymmetricMethod::Direct,
        1e-12,
    )?;
    let (u, _) = solver.solve(&load)?;
    ScalarField::new(*grid, u)
}

/// Adds seeded i.i.d. nodal noise to a reference field.
pub fn add_noise(reference: &ScalarField, noise: &NoiseSpec) -> Result<ScalarField> {
    if !(noise.level >= 0.0) || !noise.level.is_finite() {
        return Err(Error::invalid(format!(
            "noise level {} must be non-negative",
            noise.level
        )));
    }
    if noise.level == 0.0 {
        return Ok(reference.clone());
    }
    let umax = reference.coeffs().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let sigma = noise.level * umax;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let coeffs = reference.coeffs().iter().map(|u| u + normal.sample(&mut rng)).collect();
    ScalarField::new(*reference.grid(), coeffs)
}

/// Forward simulation plus noise.
pub fn generate_measurements(
    geom: &InclusionGeometry,
    grid: &StructuredGrid,
    coeffs: &ModelCoefficients,
    noise: &NoiseSpec,
) -> Result<ScalarField> {
    add_noise(&reference_state(geom, grid, coeffs)?, noise)
}

/// A `k x k` array of equidistant sensor patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub mask: MeasurementMask,
    pub requested_coverage: f64,
    /// Covered fraction of the domain after snapping to cell boundaries.
    pub coverage: f64,
}

/// Places `k x k` patches, one centred in each tile of the domain, each of
/// area `coverage * |domain| / k^2` before snapping.
///
/// Patches are square unless a square would not fit its tile, in which case
/// the short side is clamped to the tile and the long side keeps the area.
/// Edges are snapped to cell boundaries of `grid`.
pub fn sensor_mask(k: usize, coverage: f64, grid: &StructuredGrid) -> Result<SensorLayout> {
    if k == 0 {
        return Err(Error::invalid("sensor count must be positive"));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::invalid(format!("coverage {coverage} must lie in (0, 1)")));
    }
    let (lx, ly) = (grid.lx(), grid.ly());
    let (tx, ty) = (lx / k as f64, ly / k as f64);
    let patch_area = coverage * lx * ly / (k * k) as f64;
    let side = patch_area.sqrt();
    let (sx, sy) = if side <= tx.min(ty) {
        (side, side)
    } else if tx < ty {
        (tx, patch_area / tx)
    } else {
        (patch_area / ty, ty)
    };
    if sx > tx * (1.0 + 1e-12) || sy > ty * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "a sensor of area {patch_area:.4} does not fit a {tx:.4} x {ty:.4} tile"
        )));
    }
    let (hx, hy) = (grid.hx(), grid.hy());
    let cells_x = ((sx / hx).round() as usize).max(1);
    let cells_y = ((sy / hy).round() as usize).max(1);
    let mut patches = Vec::with_capacity(k * k);
    for j in 0..k {
        for i in 0..k {
            let cx = (i as f64 + 0.5) * tx;
            let cy = (j as f64 + 0.5) * ty;
            let i0 = snap_start(cx, cells_x, hx, grid.nx());
            let j0 = snap_start(cy, cells_y, hy, grid.ny());
            patches.push(Rect::new(
                grid.x(i0),
                grid.x(i0 + cells_x),
                grid.y(j0),
                grid.y(j0 + cells_y),
            )?);
        }
    }
    let mask = MeasurementMask::patches(patches, grid)?;
    let actual = mask.area(grid) / grid.area();
    info!(
        "{k}x{k} sensors cover {:.1}% of the domain (requested {:.1}%)",
        100.0 * actual,
        100.0 * coverage
    );
    Ok(SensorLayout {
        mask,
        requested_coverage: coverage,
        coverage: actual,
    })
}

/// First cell index of a run of `cells` cells centred near `centre`.
fn snap_start(centre: f64, cells: usize, h: f64, n: usize) -> usize {
    let start = (centre / h - cells as f64 / 2.0).round().max(0.0) as usize;
    start.min(n.saturating_sub(cells))
}

/// Transfers fine-grid measurements to a coarser nested grid.
pub fn restrict_measurements(ub: &ScalarField, coarse: &StructuredGrid) -> Result<ScalarField> {
    restrict_full_weighting(ub, coarse)
}
