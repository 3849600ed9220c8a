//! Dense row-major matrices and the handful of reductions the rest of the
//! crate needs.
//!
//! Every product accumulates each output entry in ascending inner-index
//! order starting from zero, so a row of `A * B` depends only on the matching
//! row of `A`. The engine relies on this to get bit-identical results no
//! matter how token rows are grouped into chunks.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 && self.cols > 0 {
            f.debug_list()
                .entries(self.data.chunks(self.cols))
                .finish()?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Panics if the closure produces a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(
                    v.is_finite(),
                    "from_fn produced non-finite value at ({i}, {j})"
                );
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`; sampling happens in `f64`
    /// so `f32` and `f64` matrices from the same stream agree up to rounding.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { rows, cols, data }
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Contiguous row-major slice covering `rows` without copying.
    #[inline]
    pub fn row_block(&self, rows: Range<usize>) -> &[T] {
        &self.data[rows.start * self.cols..rows.end * self.cols]
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Matrix<T> {
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data: self.row_block(rows).to_vec(),
        }
    }

    pub fn slice_cols(&self, cols: Range<usize>) -> Matrix<T> {
        assert!(cols.end <= self.cols, "column range out of bounds");
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[cols.clone()]);
        }
        Matrix {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    /// Concatenates matrices side by side.
    pub fn hstack(parts: &[Matrix<T>]) -> Result<Matrix<T>> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            if p.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "hstack",
                    left: (rows, 0),
                    right: p.shape(),
                });
            }
        }
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks `other` underneath `self`.
    pub fn append_rows(&mut self, other: &Matrix<T>) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "append_rows",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Replaces rows `start..start + other.rows()` in place.
    pub(crate) fn overwrite_rows(&mut self, start: usize, other: &Matrix<T>) -> Result<()> {
        if other.cols != self.cols || start + other.rows > self.rows {
            return Err(Error::ShapeMismatch {
                op: "overwrite_rows",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let dst = &mut self.data[start * self.cols..(start + other.rows) * self.cols];
        dst.copy_from_slice(&other.data);
        Ok(())
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Standard product `self * b`.
    pub fn matmul(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                axpy(o_row, a_ik, b.row(k));
            }
        }
        Ok(out)
    }

    pub fn add(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(b, "sub", |x, y| x - y)
    }

    pub fn add_assign(&mut self, b: &Matrix<T>) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: b.shape(),
            });
        }
        for (x, &y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(
        &self,
        b: &Matrix<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Matrix<T>> {
        if self.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: b.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// MAC count of `a * b`: `a.rows * a.cols * b.cols`.
#[inline]
pub fn matmul_macs<T>(a: &Matrix<T>, b: &Matrix<T>) -> u64 {
    (a.rows * a.cols * b.cols) as u64
}

/// `y += a * x`.
#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Softmax along each row, with the row maximum subtracted first.
///
/// A row made entirely of `-inf` (fully masked) maps to all zeros.
pub fn row_softmax<T: Scalar>(s: &Matrix<T>) -> Matrix<T> {
    let mut out = s.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Cosine of the angle between the flattened matrices.
pub fn cosine_similarity<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    cosine_slices(&a.data, &b.data)
}

pub(crate) fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Mean absolute entry; zero for an empty matrix.
pub fn l1_norm_mean<T: Scalar>(a: &Matrix<T>) -> T {
    if a.is_empty() {
        return T::zero();
    }
    let sum = a.data.iter().fold(T::zero(), |acc, &x| acc + x.abs());
    sum / T::of_usize(a.len())
}

/// Normwise relative error `max|x - y| / max|y|` (absolute when `y` is all
/// zeros).
pub fn max_relative_error<T: Scalar>(x: &Matrix<T>, reference: &Matrix<T>) -> Result<f64> {
    let diff = x.sub(reference)?;
    let scale = reference.max_abs().as_f64();
    let err = diff.max_abs().as_f64();
    Ok(if scale > 0.0 { err / scale } else { err })
}
