//! Restarted GMRES with ILU(0) right preconditioning.

use super::{dot, norm, SolverReport};
use crate::error::{Error, Result};
use crate::fem::SparseOperator;

/// Incomplete LU with the sparsity pattern of the matrix itself.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: SparseOperator,
    values: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &SparseOperator) -> Result<Self> {
        let n = a.rows();
        let rp = a.row_ptr();
        let ci = a.col_idx();
        let mut values = a.values().to_vec();
        let mut diag_pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in rp[i]..rp[i + 1] {
                if ci[k] == i {
                    diag_pos[i] = k;
                }
            }
            if diag_pos[i] == usize::MAX {
                return Err(Error::Singular(format!("row {i} has no diagonal entry")));
            }
        }
        let mut col_pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in rp[i]..rp[i + 1] {
                col_pos[ci[k]] = k;
            }
            for k in rp[i]..rp[i + 1] {
                let j = ci[k];
                if j >= i {
                    break;
                }
                let pivot = values[diag_pos[j]];
                if pivot == 0.0 {
                    return Err(Error::Singular(format!("zero ILU pivot in row {j}")));
                }
                let l = values[k] / pivot;
                values[k] = l;
                for kk in diag_pos[j] + 1..rp[j + 1] {
                    let pos = col_pos[ci[kk]];
                    if pos != usize::MAX {
                        values[pos] -= l * values[kk];
                    }
                }
            }
            for k in rp[i]..rp[i + 1] {
                col_pos[ci[k]] = usize::MAX;
            }
        }
        Ok(Self {
            lu: a.clone(),
            values,
            diag_pos,
        })
    }

    /// Applies `(LU)^{-1}`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let rp = self.lu.row_ptr();
        let ci = self.lu.col_idx();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in rp[i]..self.diag_pos[i] {
                s -= self.values[k] * y[ci[k]];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in self.diag_pos[i] + 1..rp[i + 1] {
                s -= self.values[k] * y[ci[k]];
            }
            y[i] = s / self.values[self.diag_pos[i]];
        }
        y
    }
}

pub struct GmresOptions {
    pub restart: usize,
    pub max_iters: usize,
}

/// Solves `a x = b` to `||b - a x|| <= tol * max(1, ||b||)`.
pub fn gmres(
    a: &SparseOperator,
    precond: &Ilu0,
    b: &[f64],
    tol: f64,
    opts: &GmresOptions,
) -> Result<(Vec<f64>, SolverReport)> {
    let n = b.len();
    let target = tol * norm(b).max(1.0);
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let restart = opts.restart.max(1).min(n.max(1));
    loop {
        let ax = a.apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        history.push(beta);
        if beta <= target {
            return Ok((
                x,
                SolverReport {
                    iterations,
                    final_residual: beta,
                    converged: true,
                    residual_history: history,
                },
            ));
        }
        if iterations >= opts.max_iters {
            return Err(Error::NotConverged {
                solver: "gmres",
                report: SolverReport {
                    iterations,
                    final_residual: beta,
                    converged: false,
                    residual_history: history,
                },
            });
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..restart {
            if iterations >= opts.max_iters {
                break;
            }
            iterations += 1;
            let mut w = a.apply(&precond.apply(&basis[j]));
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                h[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let hn = norm(&w);
            h[j + 1][j] = hn;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let rho = h[j][j].hypot(h[j + 1][j]);
            cs[j] = h[j][j] / rho;
            sn[j] = h[j + 1][j] / rho;
            h[j][j] = rho;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            if g[j + 1].abs() <= target || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut s = g[i];
            for k in i + 1..used {
                s -= h[i][k] * y[k];
            }
            y[i] = s / h[i][i];
        }
        let mut z = vec![0.0; n];
        for (yi, v) in y.iter().zip(&basis) {
            for (zk, vk) in z.iter_mut().zip(v) {
                *zk += yi * vk;
            }
        }
        let dx = precond.apply(&z);
        for (xk, d) in x.iter_mut().zip(&dx) {
            *xk += d;
        }
    }
}
