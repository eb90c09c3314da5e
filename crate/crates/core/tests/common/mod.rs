//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use srcid::fem::{gauss_legendre_unit, SparseOperator};
use srcid::grid::{ScalarField, StructuredGrid};
use srcid::relax::ReducedProblem;

pub fn dense(a: &SparseOperator) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        for (c, v) in a.row(r) {
            m[(r, c)] += v;
        }
    }
    m
}

/// Dense LU solve.
pub fn dense_solve(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    a.clone()
        .lu()
        .solve(&DVector::from_column_slice(b))
        .expect("oracle matrix is singular")
        .as_slice()
        .to_vec()
}

/// Dense reduced Hessian `M S^-T Mm S^-1 M + mu M` and the gradient at `f = 0`.
pub fn dense_reduced_quadratic(p: &ReducedProblem) -> (DMatrix<f64>, DVector<f64>) {
    let s = dense(p.solver().operator());
    let m = dense(p.mass());
    let mm = dense(p.measurement_mass());
    let lu = s.clone().lu();
    let lut = s.transpose().lu();
    let sinv_m = lu.solve(&m).expect("oracle matrix is singular");
    let h = &m * lut.solve(&(&mm * &sinv_m)).expect("oracle matrix is singular") + &m * p.mu();
    let ub = DVector::from_column_slice(p.target().coeffs());
    let g0 = -(&m * lut.solve(&(&mm * ub)).expect("oracle matrix is singular"));
    (h, g0)
}

/// Dense saddle matrix `[[H, P^T], [P, 0]]` for the sorted active indices.
pub fn dense_kkt(h: &DMatrix<f64>, active: &[usize]) -> DMatrix<f64> {
    let n = h.nrows();
    let dim = n + active.len();
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, &j) in active.iter().enumerate() {
        k[(j, n + r)] = 1.0;
        k[(n + r, j)] = 1.0;
    }
    k
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// `int_{phi > 0} phi_i dx` for bilinear `phi`, exact up to rounding.
///
/// Along each line of constant `xi` the level set is linear in `eta`, so the
/// positive part is an interval with a closed-form integral; the remaining
/// integral over `xi` is split at its kinks and done with Gauss rules.
pub fn exact_source_load(grid: &StructuredGrid, phi: &ScalarField) -> Vec<f64> {
    let (gx, gw) = gauss_legendre_unit(24);
    let area = grid.cell_area();
    let mut load = vec![0.0; grid.num_nodes()];
    for cell in 0..grid.num_cells() {
        let v = phi.cell_values(cell);
        let nodes = grid.cell_nodes(cell);
        if v.iter().all(|&p| p > 0.0) || v.iter().all(|&p| p <= 0.0) {
            if v[0] > 0.0 {
                for &node in &nodes {
                    load[node] += area / 4.0;
                }
            }
            continue;
        }
        let mut breaks = vec![0.0, 1.0];
        for (p, q) in [(v[0], v[1]), (v[2], v[3])] {
            if (p > 0.0) != (q > 0.0) {
                breaks.push(p / (p - q));
            }
        }
        breaks.sort_by(f64::total_cmp);
        let mut local = [0.0; 4];
        for win in breaks.windows(2) {
            let (x0, x1) = (win[0], win[1]);
            if x1 - x0 <= 0.0 {
                continue;
            }
            for (t, w) in gx.iter().zip(&gw) {
                let xi = x0 + (x1 - x0) * t;
                let a = (1.0 - xi) * v[0] + xi * v[1];
                let top = (1.0 - xi) * v[2] + xi * v[3];
                let b = top - a;
                let (lo, hi) = if b == 0.0 {
                    if a > 0.0 {
                        (0.0, 1.0)
                    } else {
                        (0.0, 0.0)
                    }
                } else {
                    let r = -a / b;
                    if b > 0.0 {
                        (r.clamp(0.0, 1.0), 1.0)
                    } else {
                        (0.0, r.clamp(0.0, 1.0))
                    }
                };
                if hi <= lo {
                    continue;
                }
                let i_one_minus = (hi - hi * hi / 2.0) - (lo - lo * lo / 2.0);
                let i_eta = (hi * hi - lo * lo) / 2.0;
                let wx = w * (x1 - x0) * area;
                local[0] += wx * (1.0 - xi) * i_one_minus;
                local[1] += wx * xi * i_one_minus;
                local[2] += wx * (1.0 - xi) * i_eta;
                local[3] += wx * xi * i_eta;
            }
        }
        for (a, &node) in nodes.iter().enumerate() {
            load[node] += local[a];
        }
    }
    load
}
