//! Linear solvers and the matrix-free operator contract.

mod banded;
mod gmres;
mod minres;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use banded::BandedLu;
pub use gmres::{gmres, GmresOptions, Ilu0};
pub use minres::{check_symmetry, minres, MinresOptions};

use crate::error::{Error, Result};
use crate::fem::SparseOperator;
use crate::grid::StructuredGrid;

/// Outcome of an iterative (or checked direct) solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    /// Residual norm per iteration, starting with the initial residual.
    pub residual_history: Vec<f64>,
}

/// A square linear map known only through its action.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()>;
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        self.apply_into(x, y);
        Ok(())
    }
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        (self.f)(x, y)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// How nonsymmetric PDE systems are solved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonsymmetricMethod {
    /// Banded LU with partial pivoting.
    #[default]
    Direct,
    /// ILU(0)-preconditioned restarted GMRES.
    Gmres,
}

const GMRES_RESTART: usize = 60;
/// Refinement sweeps attempted when a direct solve misses the residual target.
const REFINEMENT_SWEEPS: usize = 3;
/// Multiple of machine epsilon defining a backward-stable direct residual.
const ROUNDING_FLOOR: f64 = 64.0;

/// Solves `a x = rhs` with the default direct method.
pub fn solve_nonsymmetric(a: &SparseOperator, rhs: &[f64], tol: f64) -> Result<(Vec<f64>, SolverReport)> {
    PdeSolver::new(a.clone(), None, NonsymmetricMethod::Direct, tol)?.solve(rhs)
}

enum Backend {
    Direct(BandedLu),
    Gmres {
        ilu: Ilu0,
        transpose: SparseOperator,
        ilu_t: Ilu0,
    },
}

/// A factored (or preconditioned) PDE operator reused across many solves.
///
/// Both `A x = b` and `A^T x = b` are available; every call bumps a shared
/// solve counter.
pub struct PdeSolver {
    op: SparseOperator,
    backend: Backend,
    tol: f64,
    solves: AtomicUsize,
}

impl std::fmt::Debug for PdeSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdeSolver")
            .field("dim", &self.op.rows())
            .field("tol", &self.tol)
            .field("solves", &self.solve_count())
            .finish()
    }
}

impl PdeSolver {
    pub fn new(op: SparseOperator, ordering: Option<&[usize]>, method: NonsymmetricMethod, tol: f64) -> Result<Self> {
        if op.rows() != op.cols() {
            return Err(Error::invalid("PDE operator must be square"));
        }
        if !(tol > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        let backend = match method {
            NonsymmetricMethod::Direct => Backend::Direct(BandedLu::factor(&op, ordering)?),
            NonsymmetricMethod::Gmres => {
                // ILU cannot see a zero-sum kernel, so probe it explicitly
                if op.rows() > 0 && is_pure_neumann(&op) {
                    return Err(Error::Singular("operator annihilates constants".into()));
                }
                let transpose = op.transpose();
                Backend::Gmres {
                    ilu: Ilu0::new(&op)?,
                    ilu_t: Ilu0::new(&transpose)?,
                    transpose,
                }
            }
        };
        Ok(Self {
            op,
            backend,
            tol,
            solves: AtomicUsize::new(0),
        })
    }

    /// Uses the grid's bandwidth-reducing node ordering for the direct path.
    pub fn for_grid(op: SparseOperator, grid: &StructuredGrid, method: NonsymmetricMethod, tol: f64) -> Result<Self> {
        let ordering = grid.bandwidth_ordering();
        Self::new(op, ordering.as_deref(), method, tol)
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.op
    }

    pub fn dim(&self) -> usize {
        self.op.rows()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.solves.store(0, Ordering::Relaxed);
    }

    /// Solves `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<(Vec<f64>, SolverReport)> {
        self.dispatch(rhs, false)
    }

    /// Solves `A^T x = rhs`.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<(Vec<f64>, SolverReport)> {
        self.dispatch(rhs, true)
    }

    fn dispatch(&self, rhs: &[f64], transpose: bool) -> Result<(Vec<f64>, SolverReport)> {
        if rhs.len() != self.dim() {
            return Err(Error::invalid(format!(
                "right-hand side has length {}, operator dimension is {}",
                rhs.len(),
                self.dim()
            )));
        }
        self.solves.fetch_add(1, Ordering::Relaxed);
        match &self.backend {
            Backend::Direct(lu) => self.direct(lu, rhs, transpose),
            Backend::Gmres {
                ilu,
                transpose: at,
                ilu_t,
            } => {
                let opts = GmresOptions {
                    restart: GMRES_RESTART,
                    max_iters: self.dim(),
                };
                if transpose {
                    gmres(at, ilu_t, rhs, self.tol, &opts)
                } else {
                    gmres(&self.op, ilu, rhs, self.tol, &opts)
                }
            }
        }
    }

    fn residual(&self, x: &[f64], rhs: &[f64], transpose: bool) -> Vec<f64> {
        let ax = if transpose {
            self.op.apply_transpose(x)
        } else {
            self.op.apply(x)
        };
        rhs.iter().zip(&ax).map(|(b, a)| b - a).collect()
    }

    fn direct(&self, lu: &BandedLu, rhs: &[f64], transpose: bool) -> Result<(Vec<f64>, SolverReport)> {
        let run = |b: &[f64]| {
            if transpose {
                lu.solve_transpose(b)
            } else {
                lu.solve(b)
            }
        };
        let mut x = run(rhs);
        // a residual at the rounding floor is accepted even below the target
        let floor = ROUNDING_FLOOR * f64::EPSILON * (self.op.norm_inf() * norm(&x) + norm(rhs));
        let target = (self.tol * norm(rhs).max(1.0)).max(floor);
        let mut r = self.residual(&x, rhs, transpose);
        let mut res = norm(&r);
        let mut history = vec![res];
        let mut sweeps = 0;
        while res > target && sweeps < REFINEMENT_SWEEPS {
            sweeps += 1;
            axpy(1.0, &run(&r), &mut x);
            r = self.residual(&x, rhs, transpose);
            res = norm(&r);
            history.push(res);
        }
        let report = SolverReport {
            iterations: sweeps + 1,
            final_residual: res,
            converged: res <= target,
            residual_history: history,
        };
        if !report.converged {
            return Err(Error::NotConverged {
                solver: "banded-lu",
                report,
            });
        }
        Ok((x, report))
    }
}

fn is_pure_neumann(op: &SparseOperator) -> bool {
    let ones = vec![1.0; op.cols()];
    let r = op.apply(&ones);
    norm(&r) <= 1e-12 * op.norm_inf().max(f64::MIN_POSITIVE) * (op.rows() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_triangular() {
        let id = SparseOperator::identity(3);
        let (x, rep) = solve_nonsymmetric(&id, &[1.0, 0.0, 0.0], 1e-12).unwrap();
        assert_eq!(x, vec![1.0, 0.0, 0.0]);
        assert!(rep.converged);
        let a = SparseOperator::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, 1.0)]);
        let (x, _) = solve_nonsymmetric(&a, &[3.0, 1.0], 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn minres_small_indefinite() {
        let a = SparseOperator::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0)]);
        let (x, rep) = minres(&a, &[1.0, 0.0], 1e-12, &MinresOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(x[0].abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        let d = SparseOperator::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        let (x, _) = minres(&d, &[2.0, 3.0], 1e-12, &MinresOptions::default()).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn minres_rejects_asymmetry_when_probed() {
        let a = SparseOperator::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, 1.0)]);
        let opts = MinresOptions {
            symmetry_check: Some(3),
            ..Default::default()
        };
        assert!(matches!(
            minres(&a, &[1.0, 1.0], 1e-10, &opts),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gmres_path_matches_direct() {
        let n = 30;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i > 0 {
                t.push((i, i - 1, -1.5));
            }
            if i + 1 < n {
                t.push((i, i + 1, -0.5));
            }
        }
        let a = SparseOperator::from_triplets(n, n, &t);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let direct = PdeSolver::new(a.clone(), None, NonsymmetricMethod::Direct, 1e-12).unwrap();
        let iter = PdeSolver::new(a, None, NonsymmetricMethod::Gmres, 1e-12).unwrap();
        for transpose in [false, true] {
            let (x1, _) = direct.dispatch(&b, transpose).unwrap();
            let (x2, _) = iter.dispatch(&b, transpose).unwrap();
            for (p, q) in x1.iter().zip(&x2) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        assert_eq!(direct.solve_count(), 2);
    }
}
