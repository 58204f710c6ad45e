//! Row-major dense matrices and the handful of kernels the losses are built
//! from: matmul, row gather, row-wise logsumexp and per-row dot products.
//!
//! Every kernel accumulates in a fixed order, so identical inputs always give
//! bitwise-identical outputs regardless of how often or where they run.

use std::fmt;
use std::iter::Sum;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Rows of the right-hand operand processed per cache block.
const BLOCK: usize = 64;

/// Accumulator lanes in [`dot`]. Fixed so the summation order never changes.
const LANES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Code written into checkpoint headers.
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Floating-point element type of a [`Matrix`].
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn put_le(self, out: &mut Vec<u8>);

    /// Decodes one little-endian value; `bytes` holds exactly `DTYPE.size_of()` bytes.
    fn get_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(bytes);
        f32::from_le_bytes(buf)
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(bytes);
        f64::from_le_bytes(buf)
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Like [`Matrix::zeros`], but reports an oversized request as
    /// [`Error::Resource`] instead of aborting the process.
    pub fn try_zeros(rows: usize, cols: usize) -> Result<Self> {
        let len = rows.checked_mul(cols).ok_or_else(|| {
            Error::Resource(format!("matrix of {rows}x{cols} elements overflows usize"))
        })?;
        let mut data = Vec::new();
        data.try_reserve_exact(len).map_err(|_| {
            Error::Resource(format!(
                "cannot allocate {rows}x{cols} {} matrix ({} bytes)",
                T::DTYPE,
                len.saturating_mul(T::DTYPE.size_of())
            ))
        })?;
        data.resize(len, T::zero());
        Ok(Self { rows, cols, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(contract(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(contract(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
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

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        assert!(
            j < self.cols,
            "column {j} out of range for {} columns",
            self.cols
        );
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        assert!(
            j < self.cols,
            "column {j} out of range for {} columns",
            self.cols
        );
        self.data[i * self.cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stacks `other` below `self`.
    pub fn concat_rows(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest elementwise absolute difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// Dense vector, one value per matrix row.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T>(Vec<T>);

impl<T: Real> Vector<T> {
    pub fn new(data: Vec<T>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(data: Vec<T>) -> Self {
        Self(data)
    }
}

/// Inner product with a fixed lane-striped summation order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `a · b` or, with `transpose_b`, `a · bᵀ`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>, transpose_b: bool) -> Result<Matrix<T>> {
    let inner_b = if transpose_b { b.cols } else { b.rows };
    if a.cols != inner_b {
        return Err(Error::Shape {
            op: if transpose_b {
                "matmul(a, bᵀ)"
            } else {
                "matmul(a, b)"
            },
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }

    if transpose_b {
        let n = b.rows;
        let mut out = Matrix::try_zeros(a.rows, n)?;
        for start in (0..n).step_by(BLOCK) {
            let end = (start + BLOCK).min(n);
            for i in 0..a.rows {
                let ai = a.row(i);
                let out_row = &mut out.data[i * n + start..i * n + end];
                for (o, j) in out_row.iter_mut().zip(start..end) {
                    *o = dot(ai, b.row(j));
                }
            }
        }
        Ok(out)
    } else {
        let k = a.cols;
        let mut out = Matrix::try_zeros(a.rows, b.cols)?;
        for start in (0..k).step_by(BLOCK) {
            let end = (start + BLOCK).min(k);
            for i in 0..a.rows {
                let ai = &a.data[i * k..(i + 1) * k];
                let out_row = out.row_mut(i);
                for (p, &x) in ai.iter().enumerate().take(end).skip(start) {
                    axpy(out_row, x, b.row(p));
                }
            }
        }
        Ok(out)
    }
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_transpose_a<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul(aᵀ, b)",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let m = a.cols;
    let mut out = Matrix::try_zeros(m, b.cols)?;
    for start in (0..m).step_by(BLOCK) {
        let end = (start + BLOCK).min(m);
        for i in 0..a.rows {
            let ai = a.row(i);
            let bi = b.row(i);
            for (j, &x) in ai.iter().enumerate().take(end).skip(start) {
                axpy(out.row_mut(j), x, bi);
            }
        }
    }
    Ok(out)
}

/// Copies `table` rows in `ids` order; duplicate ids give duplicate rows.
pub fn row_gather<T: Real>(table: &Matrix<T>, ids: &[usize]) -> Result<Matrix<T>> {
    let mut data = Vec::with_capacity(ids.len() * table.cols);
    for &id in ids {
        if id >= table.rows {
            return Err(Error::Index { id, n: table.rows });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Matrix {
        rows: ids.len(),
        cols: table.cols,
        data,
    })
}

/// Max-shifted `ln Σ exp(x)`. Returns `-inf` for an all `-inf` input.
pub fn logsumexp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn row_logsumexp<T: Real>(m: &Matrix<T>) -> Result<Vector<T>> {
    if m.cols == 0 {
        return Err(contract("row_logsumexp needs at least one column"));
    }
    Ok(Vector((0..m.rows).map(|i| logsumexp(m.row(i))).collect()))
}

pub fn row_dot<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Vector<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "row_dot",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(Vector(
        (0..a.rows).map(|i| dot(a.row(i), b.row(i))).collect(),
    ))
}
