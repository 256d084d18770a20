//! Dense row-major matrices and the handful of factorizations the models need.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter tried first when a Cholesky factorization fails.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-2;

/// Dense matrix of `f64` stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = String;

    fn try_from(raw: RawMatrix) -> std::result::Result<Self, String> {
        if raw.data.len() != raw.rows * raw.cols {
            return Err(format!(
                "matrix data length {} does not match shape {}x{}",
                raw.data.len(),
                raw.rows,
                raw.cols
            ));
        }
        Ok(Matrix {
            rows: raw.rows,
            cols: raw.cols,
            data: raw.data,
        })
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Wraps row-major `data`. Panics if the length does not match the shape.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Matrix::new(1, 1, vec![value])
    }

    /// Column vector.
    pub fn col_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Matrix::new(n, 1, values)
    }

    /// Row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Matrix::new(1, n, values)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in zip_map");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in axpy");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, false)
    }

    /// Copy of the block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let src = &self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + cols];
            out.row_mut(i).copy_from_slice(src);
        }
        out
    }

    /// Cholesky factor without any jitter; `None` when a pivot is not positive.
    pub fn cholesky_plain(&self) -> std::result::Result<Matrix, (usize, f64)> {
        assert_eq!(self.rows, self.cols, "cholesky of non-square matrix");
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j);
            {
                let lj = &l.data[j * n..j * n + j];
                d -= lj.iter().map(|v| v * v).sum::<f64>();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err((j, d));
            }
            let djj = d.sqrt();
            l.data[j * n + j] = djj;
            for i in j + 1..n {
                let (li, lj) = (&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
                let dot: f64 = li.iter().zip(lj).map(|(a, b)| a * b).sum();
                l.data[i * n + j] = (self.get(i, j) - dot) / djj;
            }
        }
        Ok(l)
    }

    /// Lower Cholesky factor with the escalating jitter policy.
    ///
    /// Returns the factor and the absolute jitter that was added to the
    /// diagonal (zero when the plain factorization succeeded).
    pub fn cholesky_jittered(&self) -> Result<(Matrix, f64)> {
        if self.rows == 0 || self.rows != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "cholesky needs a non-empty square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let (row, pivot) = match self.cholesky_plain() {
            Ok(l) => return Ok((l, 0.0)),
            Err(e) => e,
        };
        let n = self.rows;
        let mean_diag = (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64;
        if !(mean_diag > 0.0) || !mean_diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                row,
                pivot,
                jitter: 0.0,
            });
        }
        let mut rel = JITTER_START;
        let mut last = (row, pivot, 0.0);
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * mean_diag;
            let mut a = self.clone();
            for i in 0..n {
                a.data[i * n + i] += jitter;
            }
            match a.cholesky_plain() {
                Ok(l) => return Ok((l, jitter)),
                Err((r, p)) => last = (r, p, jitter),
            }
            rel *= 10.0;
        }
        Err(Error::NotPositiveDefinite {
            row: last.0,
            pivot: last.1,
            jitter: last.2,
        })
    }

    /// Lower Cholesky factor, see [`Matrix::cholesky_jittered`].
    pub fn cholesky(&self) -> Result<Matrix> {
        self.cholesky_jittered().map(|(l, _)| l)
    }

    /// Solves `L X = B` (or `Lᵀ X = B` when `transpose`) for lower-triangular `L = self`.
    pub fn solve_lower(&self, b: &Matrix, transpose: bool) -> Matrix {
        let n = self.rows;
        assert_eq!(self.cols, n, "triangular solve needs a square factor");
        assert_eq!(b.rows, n, "triangular solve right-hand side has wrong row count");
        let m = b.cols;
        let mut x = b.clone();
        if !transpose {
            for i in 0..n {
                for k in 0..i {
                    let lik = self.data[i * n + k];
                    if lik != 0.0 {
                        let (done, rest) = x.data.split_at_mut(i * m);
                        let xk = &done[k * m..(k + 1) * m];
                        for (xi, v) in rest[..m].iter_mut().zip(xk) {
                            *xi -= lik * v;
                        }
                    }
                }
                let d = self.data[i * n + i];
                for v in &mut x.data[i * m..(i + 1) * m] {
                    *v /= d;
                }
            }
        } else {
            for i in (0..n).rev() {
                for k in i + 1..n {
                    let lki = self.data[k * n + i];
                    if lki != 0.0 {
                        let (head, tail) = x.data.split_at_mut(k * m);
                        let xk = &tail[..m];
                        for (xi, v) in head[i * m..(i + 1) * m].iter_mut().zip(xk) {
                            *xi -= lki * v;
                        }
                    }
                }
                let d = self.data[i * n + i];
                for v in &mut x.data[i * m..(i + 1) * m] {
                    *v /= d;
                }
            }
        }
        x
    }

    /// Solves `A X = B` given the lower Cholesky factor `L` of `A` (self).
    pub fn cholesky_solve(&self, b: &Matrix) -> Matrix {
        let y = self.solve_lower(b, false);
        self.solve_lower(&y, true)
    }

    /// Zeroes everything above the diagonal.
    pub fn lower_triangle(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if j <= i { self.get(i, j) } else { 0.0 })
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ in matmul: {k} vs {k2}");
    let mut c = Matrix::zeros(m, n);
    gemm_into(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// `c = alpha · op(a) · op(b) + beta · c`
pub fn gemm_into(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ in matmul");
    assert_eq!(c.shape(), (m, n), "output shape mismatch in matmul");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    // Row-major strides; a transposed operand just swaps them.
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    unsafe {
        // SAFETY: shapes were checked above; strides describe the owned buffers.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
