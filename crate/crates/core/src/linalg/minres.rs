//! MINRES for symmetric, possibly indefinite, operators (Paige & Saunders).
//!
//! Only operator applications are required; the matrix is never formed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, norm, LinearOperator, SolverReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct MinresOptions {
    /// Iteration cap; `None` means ten times the dimension.
    pub max_iters: Option<usize>,
    /// Randomized symmetry probe before iterating (seeded).
    pub symmetry_check: Option<u64>,
    /// Starting vector; zero when absent.
    pub initial_guess: Option<Vec<f64>>,
}

/// Restarts allowed when the recurred residual and the true residual part ways.
const MAX_RESTARTS: usize = 3;

/// Solves `op x = rhs` to `||rhs - op x|| <= tol * max(1, ||rhs||)`.
pub fn minres<A: LinearOperator + ?Sized>(
    op: &A,
    rhs: &[f64],
    tol: f64,
    opts: &MinresOptions,
) -> Result<(Vec<f64>, SolverReport)> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::invalid(format!(
            "right-hand side has length {}, operator dimension is {n}",
            rhs.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if let Some(seed) = opts.symmetry_check {
        check_symmetry(op, seed)?;
    }
    let cap = opts.max_iters.unwrap_or(10 * n.max(1));
    let target = tol * norm(rhs).max(1.0);

    let mut x = match &opts.initial_guess {
        Some(x0) if x0.len() == n => x0.clone(),
        Some(_) => return Err(Error::invalid("initial guess has the wrong length")),
        None => vec![0.0; n],
    };
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut restarts = 0;
    loop {
        let mut r = rhs.to_vec();
        if x.iter().any(|&v| v != 0.0) {
            let mut ax = vec![0.0; n];
            op.apply(&x, &mut ax)?;
            for (ri, ai) in r.iter_mut().zip(&ax) {
                *ri -= ai;
            }
        }
        let true_res = norm(&r);
        if true_res <= target {
            if history.is_empty() {
                history.push(true_res);
            }
            return Ok((
                x,
                SolverReport {
                    iterations,
                    final_residual: true_res,
                    converged: true,
                    residual_history: history,
                },
            ));
        }
        if iterations >= cap || restarts > MAX_RESTARTS {
            return Err(Error::NotConverged {
                solver: "minres",
                report: SolverReport {
                    iterations,
                    final_residual: true_res,
                    converged: false,
                    residual_history: history,
                },
            });
        }
        restarts += 1;
        let (dx, used) = minres_cycle(op, &r, target, cap - iterations, &mut history)?;
        iterations += used;
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
    }
}

/// One Lanczos run from a zero start on `op d = r`.
fn minres_cycle<A: LinearOperator + ?Sized>(
    op: &A,
    r: &[f64],
    target: f64,
    budget: usize,
    history: &mut Vec<f64>,
) -> Result<(Vec<f64>, usize)> {
    let n = r.len();
    let beta1 = norm(r);
    let mut x = vec![0.0; n];
    history.push(beta1);
    if beta1 == 0.0 {
        return Ok((x, 0));
    }
    let mut r1 = r.to_vec();
    let mut r2 = r.to_vec();
    let mut y = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];

    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut used = 0;

    while used < budget {
        used += 1;
        let s = 1.0 / beta;
        for (vi, ri) in v.iter_mut().zip(&r2) {
            *vi = s * ri;
        }
        op.apply(&v, &mut y)?;
        if used >= 2 {
            let f = beta / oldb;
            for (yi, ri) in y.iter_mut().zip(&r1) {
                *yi -= f * ri;
            }
        }
        let alfa = dot(&v, &y);
        let f = alfa / beta;
        for (yi, ri) in y.iter_mut().zip(&r2) {
            *yi -= f * ri;
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        oldb = beta;
        beta = norm(&r2);

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        for k in 0..n {
            w[k] = (v[k] - oldeps * w1[k] - delta * w2[k]) * denom;
            x[k] += phi * w[k];
        }
        history.push(phibar.abs());
        if phibar.abs() <= target || beta == 0.0 {
            break;
        }
    }
    Ok((x, used))
}

/// Compares `<A x, y>` and `<x, A y>` on random vectors.
pub fn check_symmetry<A: LinearOperator + ?Sized>(op: &A, seed: u64) -> Result<()> {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut ax = vec![0.0; n];
    let mut ay = vec![0.0; n];
    op.apply(&x, &mut ax)?;
    op.apply(&y, &mut ay)?;
    let lhs = dot(&ax, &y);
    let rhs = dot(&x, &ay);
    let scale = norm(&ax).max(norm(&ay)) * norm(&x).max(norm(&y));
    if (lhs - rhs).abs() > 1e-8 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "operator is not symmetric: <Ax,y> = {lhs:.6e}, <x,Ay> = {rhs:.6e}"
        )));
    }
    Ok(())
}
