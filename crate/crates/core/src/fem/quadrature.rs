//! Tensor-product Gauss-Legendre rules on the reference square `[0, 1]^2`.

use std::sync::OnceLock;

/// Points per axis on uncut cells.
pub const LOW_ORDER: usize = 2;
/// Points per axis on cells crossed by the zero level.
pub const HIGH_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    /// Gauss points per axis.
    order: usize,
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn iter(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    /// `order x order` tensor rule, exact for polynomials of degree
    /// `2 * order - 1` in each variable.
    pub fn tensor(order: usize) -> Self {
        let (x, w) = gauss_legendre_unit(order);
        let mut points = Vec::with_capacity(order * order);
        let mut weights = Vec::with_capacity(order * order);
        for (yj, wj) in x.iter().zip(&w) {
            for (xi, wi) in x.iter().zip(&w) {
                points.push([*xi, *yj]);
                weights.push(wi * wj);
            }
        }
        Self { order, points, weights }
    }
}

/// Gauss-Legendre nodes and weights mapped to `[0, 1]` (weights sum to 1).
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "a quadrature rule needs at least one point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        // Newton on P_n from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // x is descending in k; store ascending on [0, 1]
        nodes[k] = 0.5 * (1.0 - x);
        nodes[n - 1 - k] = 0.5 * (1.0 + x);
        weights[k] = 0.5 * w;
        weights[n - 1 - k] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

pub fn low_order_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| QuadratureRule::tensor(LOW_ORDER))
}

pub fn high_order_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| QuadratureRule::tensor(HIGH_ORDER))
}

/// Whether the zero level of a bilinear function passes through the cell.
///
/// Strict: a nodal zero with no sign change counts as uncut.
#[inline]
pub fn is_cut(cell_nodal_phi: &[f64; 4]) -> bool {
    let lo = cell_nodal_phi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cell_nodal_phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lo * hi < 0.0
}

/// High-order rule on cut cells, low-order rule elsewhere.
pub fn select_quadrature(cell_nodal_phi: &[f64; 4]) -> &'static QuadratureRule {
    if is_cut(cell_nodal_phi) {
        high_order_rule()
    } else {
        low_order_rule()
    }
}
