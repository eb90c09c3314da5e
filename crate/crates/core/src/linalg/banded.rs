//! Banded LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK `gbtrf` layout idea: each row keeps the
//! columns `i - kl ..= i + kl + ku`, leaving room for the fill created by
//! row interchanges. Interchanges are applied only to the trailing columns,
//! so the factorization reads `A = P_0 L_0 P_1 L_1 ... U`.

use crate::error::{Error, Result};
use crate::fem::SparseOperator;

/// Pivots below this fraction of the largest matrix entry mark the matrix singular.
const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
    /// `perm[new] = old` when the matrix was reordered before factoring.
    perm: Option<Vec<usize>>,
}

impl BandedLu {
    /// Factors `a`, optionally after the symmetric reordering `perm`.
    pub fn factor(a: &SparseOperator, perm: Option<&[usize]>) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::invalid(format!(
                "cannot factor a {}x{} operator",
                a.rows(),
                a.cols()
            )));
        }
        let reordered;
        let mat = match perm {
            Some(p) => {
                reordered = a.permuted(p);
                &reordered
            }
            None => a,
        };
        let n = mat.rows();
        let (kl, ku) = mat.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut data = vec![0.0; n * width];
        for r in 0..n {
            for (c, v) in mat.row(r) {
                data[r * width + c + kl - r] += v;
            }
        }
        let scale = mat.max_abs();
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            data,
            piv: vec![0; n],
            perm: perm.map(<[usize]>::to_vec),
        };
        lu.eliminate(scale)?;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + j + self.kl - i
    }

    fn eliminate(&mut self, scale: f64) -> Result<()> {
        let n = self.n;
        let threshold = SINGULAR_PIVOT * scale;
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let last_col = (k + self.kl + self.ku).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.data[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > threshold) {
                return Err(Error::Singular(format!(
                    "pivot {best:.3e} at column {k} is below {threshold:.3e}"
                )));
            }
            self.piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for i in k + 1..=last_row {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l == 0.0 {
                    continue;
                }
                let row_k = self.idx(k, k + 1);
                let row_i = self.idx(i, k + 1);
                for off in 0..last_col - k {
                    self.data[row_i + off] -= l * self.data[row_k + off];
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn to_internal(&self, b: &[f64]) -> Vec<f64> {
        match &self.perm {
            Some(p) => p.iter().map(|&old| b[old]).collect(),
            None => b.to_vec(),
        }
    }

    fn from_internal(&self, y: Vec<f64>) -> Vec<f64> {
        match &self.perm {
            Some(p) => {
                let mut x = vec![0.0; y.len()];
                for (new, &old) in p.iter().enumerate() {
                    x[old] = y[new];
                }
                x
            }
            None => y,
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y = self.to_internal(b);
        for k in 0..n {
            y.swap(k, self.piv[k]);
            let yk = y[k];
            if yk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    y[i] -= self.data[self.idx(i, k)] * yk;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..=(i + self.kl + self.ku).min(n - 1) {
                s -= self.data[self.idx(i, j)] * y[j];
            }
            y[i] = s / self.data[self.idx(i, i)];
        }
        self.from_internal(y)
    }

    /// Solves `A^T x = b` with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut z = self.to_internal(b);
        // U^T z = b
        for i in 0..n {
            let mut s = z[i];
            for j in i.saturating_sub(self.kl + self.ku)..i {
                s -= self.data[self.idx(j, i)] * z[j];
            }
            z[i] = s / self.data[self.idx(i, i)];
        }
        // then L_k^{-T} and P_k from the last step back
        for k in (0..n).rev() {
            let mut s = z[k];
            for i in k + 1..=(k + self.kl).min(n - 1) {
                s -= self.data[self.idx(i, k)] * z[i];
            }
            z[k] = s;
            z.swap(k, self.piv[k]);
        }
        self.from_internal(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    fn sample() -> SparseOperator {
        // needs pivoting: zero leading entry
        SparseOperator::from_triplets(
            5,
            5,
            &[
                (0, 1, 2.0),
                (0, 0, 0.0),
                (1, 0, 3.0),
                (1, 1, 1.0),
                (1, 2, -1.0),
                (2, 1, 4.0),
                (2, 2, 1.0),
                (2, 3, 2.0),
                (3, 2, -2.0),
                (3, 3, 5.0),
                (3, 4, 1.0),
                (4, 3, 1.0),
                (4, 4, 3.0),
            ],
        )
    }

    #[test]
    fn solves_with_pivoting() {
        let a = sample();
        let lu = BandedLu::factor(&a, None).unwrap();
        let b = [1.0, 2.0, -1.0, 0.5, 3.0];
        let x = lu.solve(&b);
        let r = dense_mul(&a.to_dense(), &x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-13);
        }
        let xt = lu.solve_transpose(&b);
        let rt = dense_mul(&a.transpose().to_dense(), &xt);
        for (ri, bi) in rt.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-13);
        }
    }

    #[test]
    fn solves_with_reordering() {
        let a = sample();
        let perm = [4, 2, 0, 1, 3];
        let lu = BandedLu::factor(&a, Some(&perm)).unwrap();
        let b = [1.0, 2.0, -1.0, 0.5, 3.0];
        let x = lu.solve(&b);
        let r = a.apply(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-13);
        }
        let xt = lu.solve_transpose(&b);
        let rt = a.apply_transpose(&xt);
        for (ri, bi) in rt.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-13);
        }
    }

    #[test]
    fn detects_singularity() {
        let a = SparseOperator::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(BandedLu::factor(&a, None), Err(Error::Singular(_))));
    }
}
