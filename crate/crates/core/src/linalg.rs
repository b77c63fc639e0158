//! Small dense linear-algebra core.
//!
//! Two jobs: the k-by-k working set of the factored transform (capacitance
//! inverses, small determinants) and the brute-force n-by-n oracle that the
//! tests compare against. Double precision throughout; the same matmul kernel
//! also backs the batched network forward/backward passes, so it is written
//! to vectorize and to split across threads by disjoint output rows, which
//! keeps results bitwise independent of thread count.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::ops::{Deref, DerefMut};

/// Relative singularity threshold, stated once and reused project-wide:
/// a pivot counts as singular when below `1e-12 * max_abs(input)`.
pub const SINGULARITY_REL_EPS: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Flat vector of `f64`; derefs to a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Validated constructor: length must match and every entry be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic on already-validated
    /// inputs. Keeps hot paths free of re-scans; overflow to non-finite is
    /// caught downstream by the optimizer's gradient scan.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Vector {
    pub fn zeros(len: usize) -> Vector {
        Vector {
            data: vec![0.0; len],
        }
    }

    /// Validated constructor: every entry must be finite.
    pub fn from_vec(data: Vec<f64>) -> Result<Vector> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("vector entries must be finite"));
        }
        Ok(Vector { data })
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Vector {
        Vector { data }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Vector {
        Vector { data }
    }
}

/// Sign and log-magnitude of a determinant. `sign == 0` marks a singular
/// matrix, with `log_abs == f64::NEG_INFINITY` as the sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDet {
    pub sign: i8,
    pub log_abs: f64,
}

// ---- kernels -------------------------------------------------------------

/// c += s * b, elementwise. The compiler vectorizes this cleanly because the
/// lanes are independent.
#[inline]
pub(crate) fn axpy(c: &mut [f64], s: f64, b: &[f64]) {
    debug_assert_eq!(c.len(), b.len());
    for (ci, bi) in c.iter_mut().zip(b.iter()) {
        *ci += s * *bi;
    }
}

/// Dot product with four fixed accumulator lanes. The lane layout (and hence
/// the rounding) is part of the function's contract so results never depend
/// on optimization level or thread count.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ai = a.chunks_exact(4);
    let mut bi = b.chunks_exact(4);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// Work threshold below which matmul stays single-threaded.
const PAR_WORK_MIN: usize = 1 << 18;
const ROW_BLOCK: usize = 16;

fn matmul_rows(c_rows: &mut [f64], a: &Matrix, b: &Matrix, i0: usize, nrows: usize) {
    let bc = b.cols;
    // Work in groups of four output rows so each streamed row of b is
    // reused from cache.
    let mut base = 0;
    while base < nrows {
        let g = (nrows - base).min(4);
        for k in 0..a.cols {
            let brow = b.row(k);
            for r in 0..g {
                let i = i0 + base + r;
                let s = a.data[i * a.cols + k];
                if s != 0.0 {
                    axpy(&mut c_rows[(base + r) * bc..(base + r + 1) * bc], s, brow);
                }
            }
        }
        base += g;
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "matmul dims {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = vec![0.0; a.rows * b.cols];
    let work = a.rows * a.cols * b.cols;
    if work >= PAR_WORK_MIN && a.rows >= 2 * ROW_BLOCK {
        data.par_chunks_mut(ROW_BLOCK * b.cols)
            .enumerate()
            .for_each(|(bi, chunk)| {
                matmul_rows(chunk, a, b, bi * ROW_BLOCK, chunk.len() / b.cols);
            });
    } else {
        matmul_rows(&mut data, a, b, 0, a.rows);
    }
    Ok(Matrix::from_vec_unchecked(a.rows, b.cols, data))
}

/// a * b^T without materializing the transpose of `a`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul(a, &b.transposed())
}

/// a^T * b.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul(&a.transposed(), b)
}

/// Matrix-vector product.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vector> {
    if a.cols != x.len() {
        return Err(Error::contract(format!(
            "matvec dims {}x{} * {}",
            a.rows,
            a.cols,
            x.len()
        )));
    }
    let out = (0..a.rows).map(|i| dot(a.row(i), x)).collect();
    Ok(Vector::from_vec_unchecked(out))
}

/// Sum of the diagonal.
pub fn trace(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "trace of non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    Ok((0..m.rows).map(|i| m.get(i, i)).sum())
}

/// Log-determinant via LU with partial pivoting.
///
/// Returns the sign of the determinant and log|det|. A zero pivot column
/// yields `(0, -inf)`; singularity is a valid return here, not an error.
pub fn lu_logdet(m: &Matrix) -> Result<LogDet> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "lu_logdet of non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let mut a = m.data.clone();
    let mut sign: i8 = 1;
    let mut log_abs = 0.0;
    for col in 0..n {
        let mut piv = col;
        let mut piv_abs = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > piv_abs {
                piv = r;
                piv_abs = v;
            }
        }
        if piv_abs == 0.0 {
            return Ok(LogDet {
                sign: 0,
                log_abs: f64::NEG_INFINITY,
            });
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            sign = -sign;
        }
        let p = a[col * n + col];
        if p < 0.0 {
            sign = -sign;
        }
        log_abs += p.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            if f != 0.0 {
                for j in col + 1..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
            }
        }
    }
    Ok(LogDet { sign, log_abs })
}

/// Dense inverse via Gauss-Jordan with partial pivoting.
///
/// Pivots below `SINGULARITY_REL_EPS * max_abs(m)` abort with a singularity
/// error naming the pivot column.
pub fn dense_inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "inverse of non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let tol = SINGULARITY_REL_EPS * m.max_abs();
    let mut a = m.data.clone();
    let mut inv = Matrix::identity(n).data;
    for col in 0..n {
        let mut piv = col;
        let mut piv_abs = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > piv_abs {
                piv = r;
                piv_abs = v;
            }
        }
        if piv_abs <= tol {
            return Err(Error::Singular {
                pivot_col: col,
                pivot_abs: piv_abs,
            });
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let p = a[col * n + col];
        let pinv = 1.0 / p;
        for j in 0..n {
            a[col * n + j] *= pinv;
            inv[col * n + j] *= pinv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f != 0.0 {
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    Ok(Matrix::from_vec_unchecked(n, n, inv))
}
