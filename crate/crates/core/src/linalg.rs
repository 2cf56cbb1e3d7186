// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` linear algebra.
//!
//! Everything here is deterministic: reductions run in a fixed order, so the
//! same inputs always give bit-identical outputs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(Self { data })
        } else {
            Err(Error::NonFinite("vector"))
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|x| x.is_finite()));
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(dot(&self.data, &self.data))
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Self::from_vec_unchecked(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Self::from_vec_unchecked(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Self::from_vec_unchecked(self.data.iter().map(|a| a * s).collect())
    }

    /// Cosine similarity; zero if either vector is zero.
    pub fn cosine(&self, other: &Vector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }

    /// Arithmetic mean of equal-length vectors, summed in index order.
    pub fn mean(vectors: &[Vector]) -> Result<Vector> {
        let first = vectors.first().ok_or(Error::EmptyInput("vectors"))?;
        let dim = first.dim();
        let mut acc = vec![0.0; dim];
        for v in vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch("vectors of unequal length"));
            }
            for (a, x) in acc.iter_mut().zip(&v.data) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(Self::from_vec_unchecked(acc))
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch("matrix data length != rows * cols"));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vector::dim);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.dim() != cols {
                return Err(Error::DimensionMismatch("rows of unequal length"));
            }
            data.extend_from_slice(r.as_slice());
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.cols {
            return Err(Error::DimensionMismatch("matvec"));
        }
        Ok(Vector::from_vec_unchecked((0..self.rows).map(|r| dot(self.row(r), v.as_slice())).collect()))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch("matmul"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, a) in self.row(r).iter().enumerate() {
                axpy(*a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("matrix add"));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("matrix sub"));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|a| a * s).collect())
    }

    /// Largest relative asymmetry `max |a_ij - a_ji| / max |a_ij|`.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let scale = self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

/// `u v^T`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut data = Vec::with_capacity(u.dim() * v.dim());
    for a in u.as_slice() {
        data.extend(v.as_slice().iter().map(|b| a * b));
    }
    Matrix { rows: u.dim(), cols: v.dim(), data }
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    libm::sqrt(dot(m.as_slice(), m.as_slice()))
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch("cholesky needs a square matrix"));
        }
        if a.asymmetry() > 1e-9 {
            return Err(Error::NotSymmetric);
        }
        let n = a.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j) - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            d = libm::sqrt(d);
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let s = a.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        let n = self.n;
        if b.dim() != n {
            return Err(Error::DimensionMismatch("cholesky solve"));
        }
        let l = &self.lower;
        // L y = b
        let mut y = b.as_slice().to_vec();
        for i in 0..n {
            let s = y[i] - dot(&l[i * n..i * n + i], &y[..i]);
            y[i] = s / l[i * n + i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        Vector::new(y)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky factorization.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    if a.rows != b.dim() {
        return Err(Error::DimensionMismatch("solve_spd"));
    }
    Cholesky::factor(a)?.solve(b)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Vec<Vector>)> {
    if a.rows != a.cols {
        return Err(Error::DimensionMismatch("eigen needs a square matrix"));
    }
    let n = a.rows;
    let mut m = a.data.clone();
    let mut v = Matrix::identity(n).data;
    let total: f64 = m.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| Vector::from_vec_unchecked((0..n).map(|k| v[k * n + i]).collect())).collect();
    Ok((values, vectors))
}

/// Principal axes of a point cloud: mean, then the top `target_dim` unit
/// eigenvectors of the sample covariance, each signed so its largest-magnitude
/// loading is positive.
pub fn principal_axes(points: &[Vector], target_dim: usize) -> Result<(Vector, Vec<Vector>)> {
    if points.len() < 2 {
        return Err(Error::EmptyInput("pca needs at least two points"));
    }
    let mean = Vector::mean(points)?;
    let dim = mean.dim();
    if target_dim == 0 || target_dim > dim {
        return Err(Error::DimensionMismatch("pca target dimension"));
    }
    let centered: Vec<Vector> = points.iter().map(|p| p.sub(&mean)).collect();
    let spread: f64 = centered.iter().map(|c| c.dot(c)).sum();
    if spread == 0.0 {
        return Err(Error::DegenerateSpread);
    }
    let mut cov = Matrix::zeros(dim, dim);
    for c in &centered {
        let x = c.as_slice();
        for i in 0..dim {
            axpy(x[i], x, cov.row_mut(i));
        }
    }
    let scale = 1.0 / (points.len() - 1) as f64;
    cov.data.iter_mut().for_each(|x| *x *= scale);
    let (_, vectors) = symmetric_eigen(&cov)?;
    let axes = vectors
        .into_iter()
        .take(target_dim)
        .map(|axis| {
            let lead =
                axis.as_slice().iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                axis.scale(-1.0)
            } else {
                axis
            }
        })
        .collect();
    Ok((mean, axes))
}

/// Mean-centers `points` and projects them onto their top `target_dim`
/// principal axes.
pub fn pca_project(points: &[Vector], target_dim: usize) -> Result<Vec<Vector>> {
    let (mean, axes) = principal_axes(points, target_dim)?;
    Ok(points
        .iter()
        .map(|p| {
            let c = p.sub(&mean);
            Vector::from_vec_unchecked(axes.iter().map(|a| a.dot(&c)).collect())
        })
        .collect())
}

// Slice kernels shared with the model. Four independent accumulators keep the
// reduction order fixed while still letting the compiler vectorize.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
