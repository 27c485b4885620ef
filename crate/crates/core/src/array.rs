//! Dense row-major `rows x cols` arrays of `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

/// A dense 2-D array stored row-major. Rows are batch entries, columns features.
#[derive(Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "ArrayRepr"))]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Unchecked wire form; deserialization goes through [`Array::from_vec`].
#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct ArrayRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<ArrayRepr> for Array {
    type Error = Error;

    fn try_from(r: ArrayRepr) -> Result<Self> {
        Array::from_vec(r.rows, r.cols, r.data)
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array[{}x{}]", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(n, n);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::BadLength {
                shape: (rows, cols),
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds an array from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A single row.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// A single column.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// The single value of a 1x1 array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Elementwise combination of two arrays of equal shape.
    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub(crate) fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, false)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for row in self.iter_rows() {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Repeats a `1 x cols` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Self {
        debug_assert_eq!(self.rows, 1);
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self {
            rows: n,
            cols: self.cols,
            data,
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        debug_assert!(start <= end && end <= self.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..end]);
        }
        Self {
            rows: self.rows,
            cols: w,
            data,
        }
    }

    /// Places `self` at column offset `start` inside a zero array `total` columns wide.
    pub fn pad_cols(&self, start: usize, total: usize) -> Self {
        debug_assert!(start + self.cols <= total);
        let mut out = Self::zeros(self.rows, total);
        for (r, row) in self.iter_rows().enumerate() {
            out.row_mut(r)[start..start + self.cols].copy_from_slice(row);
        }
        out
    }

    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Scales row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Self {
        debug_assert_eq!(factors.len(), self.rows);
        let mut out = self.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        out
    }

    /// An `rows x cols` array whose row `i` is filled with `per_row[i]`.
    pub fn from_row_values(per_row: &[f64], cols: usize) -> Self {
        let mut data = Vec::with_capacity(per_row.len() * cols);
        for &v in per_row {
            data.extend(core::iter::repeat_n(v, cols));
        }
        Self {
            rows: per_row.len(),
            cols,
            data,
        }
    }

    /// Per-column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.rows as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Sample covariance (divides by `n - 1`).
    pub fn covariance(&self) -> Array {
        let mean = self.column_means();
        let d = self.cols;
        let mut c = Array::zeros(d, d);
        for row in self.iter_rows() {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..d {
                    c.data[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        c.scale(1.0 / (self.rows as f64 - 1.0))
    }
}

/// `op(a) * op(b)` where `op` optionally transposes, without materializing the transpose.
pub(crate) fn gemm(a: &Array, ta: bool, b: &Array, tb: bool) -> Result<Array> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != k2 {
        let left = if ta { (a.cols, a.rows) } else { a.shape() };
        let right = if tb { (b.cols, b.rows) } else { b.shape() };
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left,
            right,
        });
    }
    let mut out = Array::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe exactly the row-major buffers of `a`, `b` and
    // `out`, whose lengths were checked by construction (m*k, k*n, m*n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}
