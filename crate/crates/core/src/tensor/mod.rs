//! Dense row-major vectors and matrices in `f64`, a small set of
//! factorizations, and the seeded random stream every sampler draws from.

mod linalg;
mod rng;

pub use linalg::{
    cholesky, cholesky_exact, cholesky_inverse, cholesky_solve, logdet_from_cholesky, solve_lower,
    solve_lower_transpose, sqrtm_psd, symmetric_eigen, DEFAULT_JITTER, MAX_JITTER,
};
pub use rng::{RngState, SeededRng};

use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{NifError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Vector(vec![value; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(other).map(|(a, b)| a - b).collect()
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(other).map(|(a, b)| a + b).collect()
    }

    pub fn scale(&self, k: f64) -> Vector {
        self.0.iter().map(|a| a * k).collect()
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += k * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NifError::Shape(format!(
                "{} elements cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix literal");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vector {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NifError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(NifError::Shape(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(NifError::Shape(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = Vector::zeros(self.cols);
        for (i, vi) in v.iter().enumerate() {
            out.axpy(*vi, self.row(i));
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(NifError::Shape(format!(
                "add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * k).collect(),
        }
    }

    /// `self += k · a bᵀ`
    pub fn add_outer(&mut self, k: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(self.rows, a.len());
        debug_assert_eq!(self.cols, b.len());
        for (i, ai) in a.iter().enumerate() {
            let row = self.row_mut(i);
            for (r, bj) in row.iter_mut().zip(b) {
                *r += k * ai * bj;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }

    /// Replace with `(self + selfᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in 0..i {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `n × m` with orthonormal columns (Gram–Schmidt on Gaussian draws).
pub fn random_orthonormal(n: usize, m: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols: Vec<Vector> = Vec::with_capacity(m);
    while cols.len() < m {
        let mut v = rng.standard_normal(n);
        for c in &cols {
            let k = c.dot(&v);
            v.axpy(-k, c);
        }
        let norm = v.norm();
        if norm > 1e-6 {
            cols.push(v.scale(1.0 / norm));
        }
    }
    let mut a = Matrix::zeros(n, m);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            a[(i, j)] = c[i];
        }
    }
    a
}

/// `log N(x | 0, I)`
pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    -0.5 * (dot(x, x) + x.len() as f64 * LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = Matrix::from_rows(&[&[2.0], &[5.0]]);
        assert_eq!(
            a.matmul(&b).unwrap(),
            Matrix::from_rows(&[&[2.0], &[2.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = Matrix::from_vec(5, 3, rng.standard_normal(15).into_inner()).unwrap();
        let b = Matrix::from_vec(3, 4, rng.standard_normal(12).into_inner()).unwrap();
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(NifError::Shape(_))));
        assert!(a.matvec(&[1.0, 2.0]).is_err());
        assert!(a.tmatvec(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn tmatvec_is_transpose_matvec() {
        let mut rng = SeededRng::new(3);
        let a = Matrix::from_vec(4, 3, rng.standard_normal(12).into_inner()).unwrap();
        let v = rng.standard_normal(4);
        let lhs = a.tmatvec(&v).unwrap();
        let rhs = a.transpose().matvec(&v).unwrap();
        assert!(lhs.sub(&rhs).max_abs() < 1e-14);
    }
}
