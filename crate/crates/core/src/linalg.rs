//! Small dense row-major matrix type.
//!
//! The matrices in this crate are at most a few hundred on a side, so plain
//! triple loops are fast enough and keep the scalar type fully generic.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<T>]) -> Self {
        let rows = columns.first().map_or(0, Vec::len);
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_row_major",
                expected: format!("{} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[T], b: &[T]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dimension {}", self.cols),
                found: format!("{}", other.rows),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `M x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ x`.
    pub fn tr_matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows, "tr_matvec dimension");
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * a bᵀ` without materializing the outer product.
    pub fn add_outer(&mut self, alpha: T, a: &[T], b: &[T]) {
        assert_eq!((a.len(), b.len()), self.shape(), "add_outer shape");
        for (i, &ai) in a.iter().enumerate() {
            let s = alpha * ai;
            if s == T::zero() {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += s * bj;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Cholesky factor `L` with `self = L Lᵀ`; fails unless symmetric positive definite.
    pub fn cholesky(&self) -> Result<Self> {
        let n = self.rows;
        if self.cols != n {
            return Err(Error::ShapeMismatch {
                op: "cholesky",
                expected: "square matrix".into(),
                found: format!("{}x{}", self.rows, self.cols),
            });
        }
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut diag = self[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if diag <= T::zero() || !diag.is_finite() {
                return Err(Error::RankDeficient);
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(l)
    }

    /// Moore–Penrose pseudo-inverse of a matrix with full column rank,
    /// `(AᵀA)⁻¹Aᵀ`, via a Cholesky solve of the normal equations.
    pub fn pseudo_inverse_full_column_rank(&self) -> Result<Self> {
        let gram = self.transpose().matmul(self)?;
        let l = gram.cholesky()?;
        let n = gram.rows;
        // Solve (L Lᵀ) X = Aᵀ column by column of Aᵀ (i.e. row by row of A).
        let mut out = Self::zeros(n, self.rows);
        for col in 0..self.rows {
            let rhs = self.row(col);
            let mut y = vec![T::zero(); n];
            for i in 0..n {
                let mut s = rhs[i];
                for k in 0..i {
                    s -= l[(i, k)] * y[k];
                }
                y[i] = s / l[(i, i)];
            }
            let mut x = vec![T::zero(); n];
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * x[k];
                }
                x[i] = s / l[(i, i)];
            }
            for i in 0..n {
                out[(i, col)] = x[i];
            }
        }
        Ok(out)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        // Deterministic pseudo-random fill with a small LCG; enough for shape tests.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matvec_agrees_with_matmul() {
        let a = sample(4, 3, 1);
        let x = vec![0.3, -1.0, 2.0];
        let as_col = Matrix::from_columns(std::slice::from_ref(&x));
        let via_mm = a.matmul(&as_col).unwrap().column(0);
        for (p, q) in a.matvec(&x).iter().zip(&via_mm) {
            assert!((p - q).abs() < 1e-15);
        }
        let y = vec![1.0, 0.5, -0.25, 2.0];
        let via_t = a.transpose().matvec(&y);
        for (p, q) in a.tr_matvec(&y).iter().zip(&via_t) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn pseudo_inverse_is_left_inverse() {
        let a = sample(7, 4, 9);
        let pinv = a.pseudo_inverse_full_column_rank().unwrap();
        let eye = pinv.matmul(&a).unwrap();
        assert!(eye.max_abs_diff(&Matrix::identity(4)) < 1e-12);
        // A A⁺ is a symmetric projector.
        let p = a.matmul(&pinv).unwrap();
        assert!(p.max_abs_diff(&p.transpose()) < 1e-12);
        assert!(p.matmul(&p).unwrap().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn pseudo_inverse_rejects_rank_deficient() {
        let col = vec![1.0, 2.0, 3.0];
        let a = Matrix::from_columns(&[col.clone(), col]);
        assert!(matches!(
            a.pseudo_inverse_full_column_rank(),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn add_outer_matches_outer() {
        let mut m = sample(3, 2, 4);
        let mut expected = m.clone();
        expected.add_scaled(0.5, &Matrix::outer(&[1.0, 2.0, 3.0], &[-1.0, 4.0]));
        m.add_outer(0.5, &[1.0, 2.0, 3.0], &[-1.0, 4.0]);
        assert!(m.max_abs_diff(&expected) < 1e-15);
    }
}
