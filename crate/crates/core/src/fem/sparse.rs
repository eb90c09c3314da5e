//! Compressed sparse row storage.

use crate::grid::StructuredGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    /// Zero operator with the 9-point nodal coupling pattern of a grid.
    pub fn grid_pattern(grid: &StructuredGrid) -> Self {
        let n = grid.num_nodes();
        let (nx, ny) = (grid.nx(), grid.ny());
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(9 * n);
        row_ptr.push(0);
        for j in 0..=ny {
            for i in 0..=nx {
                for jj in j.saturating_sub(1)..=(j + 1).min(ny) {
                    for ii in i.saturating_sub(1)..=(i + 1).min(nx) {
                        col_idx.push(grid.node_index(ii, jj));
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        let nnz = col_idx.len();
        Self {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<_> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn nnz(&self) -> usize {
        self.values.len()
    }
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column positions and values of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    fn position(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |k| self.values[k])
    }

    /// Adds into an existing structural nonzero.
    ///
    /// Panics if `(r, c)` is outside the sparsity pattern.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let k = self
            .position(r, c)
            .unwrap_or_else(|| panic!("entry ({r}, {c}) is not in the sparsity pattern"));
        self.values[k] += v;
    }

    /// Scatters a 4x4 element matrix (`local[a][b]` couples test `a`, trial `b`).
    pub fn add_element(&mut self, nodes: &[usize; 4], local: &[[f64; 4]; 4]) {
        for (a, &ra) in nodes.iter().enumerate() {
            for (b, &cb) in nodes.iter().enumerate() {
                self.add(ra, cb, local[a][b]);
            }
        }
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.apply_into(x, &mut y);
        y
    }

    /// `A^T x` without forming the transpose.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k] * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let dst = next[c];
                col_idx[dst] = r;
                values[dst] = self.values[k];
                next[c] += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `a * self + b * other` for operators sharing one sparsity pattern.
    pub fn linear_combination(&self, a: f64, other: &SparseOperator, b: f64) -> Self {
        assert_eq!(self.row_ptr, other.row_ptr, "sparsity patterns differ");
        assert_eq!(self.col_idx, other.col_idx, "sparsity patterns differ");
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self { values, ..self.clone() }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Sum of all stored entries.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Symmetric permutation `P A P^T` with `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(self.rows, self.cols);
        assert_eq!(perm.len(), self.rows);
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut triplets = Vec::with_capacity(self.nnz());
        for (new_r, &old_r) in perm.iter().enumerate() {
            for (c, v) in self.row(old_r) {
                triplets.push((new_r, inv[c], v));
            }
        }
        Self::from_triplets(self.rows, self.cols, &triplets)
    }

    /// Maximum of `|i - j|` over stored entries, split into (lower, upper).
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut lower = 0;
        let mut upper = 0;
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                if c < r {
                    lower = lower.max(r - c);
                } else {
                    upper = upper.max(c - r);
                }
            }
        }
        (lower, upper)
    }
}
