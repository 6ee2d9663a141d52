//! Compressed sparse row matrices and a sparse LU factorization.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from a row-major dense array, keeping entries for
    /// which `keep(row, col, value)` holds.
    pub fn from_dense_filtered<F: Fn(usize, usize, f64) -> bool>(
        n_rows: usize,
        n_cols: usize,
        dense: &[f64],
        keep: F,
    ) -> Self {
        assert_eq!(dense.len(), n_rows * n_cols);
        let mut b = CsrBuilder::new(n_rows, n_cols);
        for i in 0..n_rows {
            for j in 0..n_cols {
                let v = dense[i * n_cols + j];
                if keep(i, j, v) {
                    b.push(j, v);
                }
            }
            b.finish_row();
        }
        b.build()
    }

    /// Keeps every non-zero entry.
    pub fn from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> Self {
        Self::from_dense_filtered(n_rows, n_cols, dense, |_, _, v| v != 0.0)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[i * self.n_cols + j] = v;
            }
        }
        d
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    /// `Y = A X` for `k` right-hand sides stored row-major, `x[j * k + s]`.
    pub fn mul_multi_into(&self, x: &[f64], y: &mut [f64], k: usize) {
        assert_eq!(x.len(), self.n_cols * k);
        assert_eq!(y.len(), self.n_rows * k);
        if k == 8 {
            return self.mul_multi_fixed::<8>(x, y);
        }
        for (i, yi) in y.chunks_exact_mut(k).enumerate() {
            yi.fill(0.0);
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                for (o, &xj) in yi.iter_mut().zip(&x[j * k..(j + 1) * k]) {
                    *o += v * xj;
                }
            }
        }
    }

    /// Same as [`CsrMatrix::mul_multi_into`] with a compile-time batch width.
    fn mul_multi_fixed<const K: usize>(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.chunks_exact_mut(K).enumerate() {
            let mut acc = [0.0; K];
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let xj: &[f64; K] = x[j * K..(j + 1) * K].try_into().expect("K values");
                for s in 0..K {
                    acc[s] += v * xj[s];
                }
            }
            yi.copy_from_slice(&acc);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `y = A^T x`.
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = vec![0.0; self.n_cols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest singular value by power iteration on `A^T A`, starting from
    /// the all-ones vector. The Rayleigh quotient approaches the norm from
    /// below.
    pub fn spectral_norm_estimate(&self, max_iter: usize, rel_tol: f64) -> f64 {
        let mut x = vec![1.0 / (self.n_cols as f64).sqrt(); self.n_cols];
        let mut sigma = 0.0;
        for _ in 0..max_iter {
            let ax = self.mul_vec(&x);
            let next_sigma = norm2(&ax);
            let mut y = self.mul_transpose_vec(&ax);
            let ny = norm2(&y);
            if ny == 0.0 {
                return next_sigma;
            }
            y.iter_mut().for_each(|v| *v /= ny);
            x = y;
            let converged = (next_sigma - sigma).abs() <= rel_tol * next_sigma;
            sigma = next_sigma;
            if converged {
                break;
            }
        }
        sigma
    }

    /// Writes `row col value` lines (zero-based indices).
    pub fn write_coordinate<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "% {} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                writeln!(out, "{i} {j} {v}")?;
            }
        }
        Ok(())
    }
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row-by-row CSR construction; columns must be pushed in ascending order.
#[derive(Debug)]
pub struct CsrBuilder {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, col: usize, value: f64) {
        debug_assert!(col < self.n_cols);
        debug_assert!(self.col_idx.len() == *self.row_ptr.last().unwrap() || *self.col_idx.last().unwrap() < col);
        self.col_idx.push(col);
        self.values.push(value);
    }

    pub fn finish_row(&mut self) {
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn build(self) -> CsrMatrix {
        assert_eq!(self.row_ptr.len(), self.n_rows + 1, "not every row was finished");
        CsrMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}

/// `A = L U` without pivoting; `L` has a unit diagonal. Both factors are
/// stored row-wise and only hold structurally non-zero entries.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    lower: CsrMatrix,
    /// Strictly upper part of `U`.
    upper: CsrMatrix,
    diag: Vec<f64>,
    /// `1 / diag`, so back substitution multiplies instead of dividing.
    inv_diag: Vec<f64>,
}

impl SparseLu {
    /// Entries with magnitude at most `drop_tol * max|A|` are treated as zeros.
    pub fn factor(a: &CsrMatrix, drop_tol: f64) -> Result<Self> {
        let n = a.n_rows();
        if a.n_cols() != n {
            return Err(Error::InvalidArgument("LU needs a square matrix".into()));
        }
        let cutoff = drop_tol * a.max_abs();
        let mut lower = CsrBuilder::new(n, n);
        let mut upper = CsrBuilder::new(n, n);
        let mut diag = vec![0.0; n];
        // U rows kept as (cols, vals) for the elimination
        let mut u_rows: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(n);
        let mut work = vec![0.0; n];
        let mut pattern = BTreeSet::new();
        let mut max_pivot = 0.0f64;
        let mut min_pivot = f64::INFINITY;

        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if v.abs() > cutoff {
                    work[j] = v;
                    pattern.insert(j);
                }
            }
            // eliminate with earlier rows in ascending column order
            while let Some(&k) = pattern.iter().next() {
                if k >= i {
                    break;
                }
                pattern.remove(&k);
                let lik = work[k] / diag[k];
                work[k] = 0.0;
                if lik == 0.0 {
                    continue;
                }
                lower.push(k, lik);
                let (ucols, uvals) = &u_rows[k];
                for (&j, &u) in ucols.iter().zip(uvals) {
                    if work[j] == 0.0 && !pattern.contains(&j) {
                        pattern.insert(j);
                    }
                    work[j] -= lik * u;
                }
            }
            lower.finish_row();

            let pivot = work[i];
            work[i] = 0.0;
            pattern.remove(&i);
            max_pivot = max_pivot.max(pivot.abs());
            min_pivot = min_pivot.min(pivot.abs());
            if !(pivot.abs() > f64::EPSILON * a.max_abs()) {
                return Err(Error::Singular {
                    row: i,
                    pivot,
                    condition: if pivot == 0.0 {
                        f64::INFINITY
                    } else {
                        max_pivot / pivot.abs()
                    },
                });
            }
            diag[i] = pivot;
            let mut ucols = Vec::with_capacity(pattern.len());
            let mut uvals = Vec::with_capacity(pattern.len());
            for &j in pattern.iter() {
                let v = work[j];
                work[j] = 0.0;
                if v != 0.0 {
                    upper.push(j, v);
                    ucols.push(j);
                    uvals.push(v);
                }
            }
            pattern.clear();
            upper.finish_row();
            u_rows.push((ucols, uvals));
        }
        log::debug!(
            "sparse LU: n = {n}, nnz(L) = {}, nnz(U) = {}, pivot ratio {:e}",
            lower.col_idx.len(),
            upper.col_idx.len() + n,
            max_pivot / min_pivot
        );
        Ok(Self {
            n,
            lower: lower.build(),
            upper: upper.build(),
            inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Ratio of largest to smallest pivot magnitude.
    pub fn pivot_ratio(&self) -> f64 {
        let (lo, hi) = self.diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
            (lo.min(d.abs()), hi.max(d.abs()))
        });
        hi / lo
    }

    pub fn nnz(&self) -> usize {
        self.lower.nnz() + self.upper.nnz() + self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            let (cols, vals) = self.lower.row(i);
            let s: f64 = cols.iter().zip(vals).map(|(&j, &l)| l * b[j]).sum();
            b[i] -= s;
        }
        for i in (0..self.n).rev() {
            let (cols, vals) = self.upper.row(i);
            let s: f64 = cols.iter().zip(vals).map(|(&j, &u)| u * b[j]).sum();
            b[i] = (b[i] - s) * self.inv_diag[i];
        }
    }

    /// Solves for `k` right-hand sides stored row-major, `b[i * k + s]`.
    pub fn solve_multi_in_place(&self, b: &mut [f64], k: usize) {
        assert_eq!(b.len(), self.n * k);
        if k == 8 {
            return self.solve_multi_fixed::<8>(b);
        }
        for i in 0..self.n {
            let (cols, vals) = self.lower.row(i);
            let (head, tail) = b.split_at_mut(i * k);
            let bi = &mut tail[..k];
            for (&j, &l) in cols.iter().zip(vals) {
                for (o, &bj) in bi.iter_mut().zip(&head[j * k..(j + 1) * k]) {
                    *o -= l * bj;
                }
            }
        }
        for i in (0..self.n).rev() {
            let (cols, vals) = self.upper.row(i);
            let (head, tail) = b.split_at_mut((i + 1) * k);
            let bi = &mut head[i * k..];
            for (&j, &u) in cols.iter().zip(vals) {
                let off = (j - i - 1) * k;
                for (o, &bj) in bi.iter_mut().zip(&tail[off..off + k]) {
                    *o -= u * bj;
                }
            }
            let d = self.inv_diag[i];
            bi.iter_mut().for_each(|o| *o *= d);
        }
    }

    /// Same as [`SparseLu::solve_multi_in_place`] with a compile-time batch width.
    fn solve_multi_fixed<const K: usize>(&self, b: &mut [f64]) {
        let load = |b: &[f64], j: usize| -> [f64; K] { b[j * K..(j + 1) * K].try_into().expect("K values") };
        for i in 0..self.n {
            let (cols, vals) = self.lower.row(i);
            if cols.is_empty() {
                continue;
            }
            let mut acc = load(b, i);
            for (&j, &l) in cols.iter().zip(vals) {
                let bj = load(b, j);
                for s in 0..K {
                    acc[s] -= l * bj[s];
                }
            }
            b[i * K..(i + 1) * K].copy_from_slice(&acc);
        }
        for i in (0..self.n).rev() {
            let (cols, vals) = self.upper.row(i);
            let mut acc = load(b, i);
            for (&j, &u) in cols.iter().zip(vals) {
                let bj = load(b, j);
                for s in 0..K {
                    acc[s] -= u * bj[s];
                }
            }
            let d = self.inv_diag[i];
            for a in acc.iter_mut() {
                *a *= d;
            }
            b[i * K..(i + 1) * K].copy_from_slice(&acc);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn dense(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        (0..n * n).map(|k| f(k / n, k % n)).collect()
    }

    #[test]
    fn csr_basics() {
        let d = vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0];
        let m = CsrMatrix::from_dense(2, 3, &d);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 2.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.to_dense(), d);
        assert_eq!(m.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 3.0]);
        assert_eq!(m.mul_transpose_vec(&[1.0, 2.0]), vec![1.0, 0.0, 8.0]);
        let mut out = Vec::new();
        m.write_coordinate(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "% 2 3 3\n0 0 1\n0 2 2\n1 2 3\n");
    }

    #[test]
    fn spectral_norm_of_known_matrices() {
        let m = CsrMatrix::from_dense(2, 2, &[3.0, 0.0, 0.0, -5.0]);
        assert!((m.spectral_norm_estimate(100, 1e-12) - 5.0).abs() < 1e-9);
        let n = 30;
        let d = dense(n, |i, j| 1.0 / (1.0 + i as f64 + 2.0 * j as f64));
        let exact = DMatrix::from_row_slice(n, n, &d).singular_values().max();
        let est = CsrMatrix::from_dense(n, n, &d).spectral_norm_estimate(100, 1e-6);
        assert!(est <= exact * (1.0 + 1e-12));
        assert!((est - exact).abs() < 1e-5 * exact);
    }

    #[test]
    fn lu_detects_singularity() {
        let m = CsrMatrix::from_dense(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(SparseLu::factor(&m, 0.0), Err(Error::Singular { row: 1, .. })));
    }

    #[test]
    fn lu_on_arrow_matrix() {
        // block diagonal plus a dense last column
        let n = 40;
        let d = dense(n, |i, j| {
            if i == j {
                4.0
            } else if i / 2 == j / 2 {
                1.0
            } else if j == n - 1 {
                0.1 / (1.0 + i as f64)
            } else {
                0.0
            }
        });
        let m = CsrMatrix::from_dense(n, n, &d);
        let lu = SparseLu::factor(&m, 0.0).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = lu.solve(&b);
        let r = m.mul_vec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-13);
        }
        assert!(lu.nnz() < 4 * n);
    }

    #[test]
    fn multi_rhs_kernels_match_single_rhs() {
        let n = 12;
        let d = dense(n, |i, j| {
            if i == j {
                5.0
            } else if (i * 7 + j * 3) % 5 == 0 {
                0.3 * (i as f64 - j as f64).sin()
            } else {
                0.0
            }
        });
        let m = CsrMatrix::from_dense(n, n, &d);
        let lu = SparseLu::factor(&m, 0.0).unwrap();
        for k in [3, 8] {
            let cols: Vec<Vec<f64>> = (0..k)
                .map(|s| (0..n).map(|i| ((i * (s + 2)) as f64).cos()).collect())
                .collect();
            let packed: Vec<f64> = (0..n * k).map(|p| cols[p % k][p / k]).collect();
            let mut y = vec![0.0; n * k];
            m.mul_multi_into(&packed, &mut y, k);
            let mut x = packed.clone();
            lu.solve_multi_in_place(&mut x, k);
            for (s, col) in cols.iter().enumerate() {
                let ys = m.mul_vec(col);
                let xs = lu.solve(col);
                for i in 0..n {
                    assert!((y[i * k + s] - ys[i]).abs() < 1e-14);
                    assert!((x[i * k + s] - xs[i]).abs() < 1e-14);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn lu_matches_dense_solver(
            entries in prop::collection::vec(-1.0..1.0f64, 36),
            mask in prop::collection::vec(prop::bool::weighted(0.4), 36),
            rhs in prop::collection::vec(-1.0..1.0f64, 6),
        ) {
            let n = 6;
            let d: Vec<f64> = (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    if i == j { 8.0 + entries[k] } else if mask[k] { entries[k] } else { 0.0 }
                })
                .collect();
            let m = CsrMatrix::from_dense(n, n, &d);
            let x = SparseLu::factor(&m, 0.0).unwrap().solve(&rhs);
            let oracle = DMatrix::from_row_slice(n, n, &d).lu().solve(&DVector::from_vec(rhs.clone())).unwrap();
            for i in 0..n {
                prop_assert!((x[i] - oracle[i]).abs() < 1e-12);
            }
        }
    }
}
