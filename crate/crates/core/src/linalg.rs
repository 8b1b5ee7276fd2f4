//! Small sparse/dense kernels used by the interior-point solver.
//!
//! Problems handled here are desk-scale (a few thousand variables at most),
//! so we keep a row-compressed sparse matrix for constraint data and fall back
//! to dense Cholesky for the reduced systems.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SparseMatrix<T: Scalar> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from per-row entry lists. Duplicate columns within a row are summed.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows.into_iter() {
            row.sort_by_key(|(c, _)| *c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: row_ptr.len() - 1,
            cols,
            row_ptr,
            col_idx,
            values,
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

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// y = Aᵀ x
    pub fn mul_t_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![T::zero(); self.cols];
        for (i, xi) in x.iter().enumerate() {
            if xi.is_zero() {
                continue;
            }
            for (c, v) in self.row(i) {
                y[c] += v * *xi;
            }
        }
        y
    }

    /// Column-wise view: for every column, the (row, value) pairs touching it.
    pub fn columns(&self) -> Vec<Vec<(usize, T)>> {
        let mut out = vec![Vec::new(); self.cols];
        for i in 0..self.rows {
            for (c, v) in self.row(i) {
                out[c].push((i, v));
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (c, v) in self.row(i) {
                d[(i, c)] += v;
            }
        }
        d
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| *a * *b)
                    .sum()
            })
            .collect()
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// Dense Cholesky factor of a symmetrically equilibrated matrix,
/// D A D = L Lᵀ with D = diag(a_ii)^(-1/2).
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
    d: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors a symmetric positive definite matrix. Only the lower triangle is read.
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.rows, a.cols);
        let n = a.rows;
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            let v = a[(i, i)];
            if !(v > T::zero()) || !v.is_finite() {
                return Err(NotPositiveDefinite {
                    pivot: i,
                    value: v.as_f64(),
                });
            }
            d.push(T::one() / v.sqrt());
        }
        let mut l = vec![T::zero(); n * n];
        let floor = T::epsilon() * T::lit(16.0);
        for j in 0..n {
            let mut p = a[(j, j)] * d[j] * d[j];
            for k in 0..j {
                p -= l[j * n + k] * l[j * n + k];
            }
            if !(p > floor) {
                return Err(NotPositiveDefinite {
                    pivot: j,
                    value: p.as_f64(),
                });
            }
            let p = p.sqrt();
            l[j * n + j] = p;
            for i in (j + 1)..n {
                let mut s = a[(i, j)] * d[i] * d[j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / p;
            }
        }
        Ok(Self { n, l, d })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for (bi, di) in b.iter_mut().zip(&self.d) {
            *bi *= *di;
        }
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for (bi, di) in b.iter_mut().zip(&self.d) {
            *bi *= *di;
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_products_match_dense() {
        let a = SparseMatrix::from_rows(3, vec![vec![(0, 1.0), (2, -2.0)], vec![], vec![(1, 3.0), (1, 1.0)]]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.mul_vec(&[1.0, 2.0, 3.0]), vec![-5.0, 0.0, 8.0]);
        assert_eq!(a.mul_t_vec(&[1.0, 5.0, -1.0]), vec![1.0, -4.0, -2.0]);
        let d = a.to_dense();
        assert_eq!(d.mul_vec(&[1.0, 2.0, 3.0]), vec![-5.0, 0.0, 8.0]);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let mut a = DenseMatrix::zeros(3, 3);
        let vals = [[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] = vals[i][j];
            }
        }
        let ch = Cholesky::factor(&a).unwrap();
        let x = ch.solve(&[1.0, -2.0, 0.5]);
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip([1.0f64, -2.0, 0.5]) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_handles_badly_scaled_diagonal() {
        let mut a = DenseMatrix::<f64>::zeros(2, 2);
        a[(0, 0)] = 1e8;
        a[(0, 1)] = 0.5;
        a[(1, 0)] = 0.5;
        a[(1, 1)] = 1e-8;
        let x = Cholesky::factor(&a).unwrap().solve(&[1.0, 1.0]);
        let r = a.mul_vec(&x);
        assert!((r[0] - 1.0).abs() < 1e-8 && (r[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn cholesky_rejects_singular() {
        let mut a = DenseMatrix::<f64>::zeros(2, 2);
        a[(0, 0)] = 1.0;
        a[(0, 1)] = 1.0;
        a[(1, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        assert!(Cholesky::factor(&a).is_err());
    }
}
