//! Dense row-major tensors.
//!
//! Everything in this crate works on rank-2 tensors (`rows × cols`); a scalar
//! is a `1 × 1` tensor and a state vector of dimension `d` is a `1 × d` row.
//! Batches of states are stacked as rows.

use serde::{Deserialize, Serialize};

use crate::error::{AdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::Shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self { shape: vec![rows, cols], data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    /// A `1 × n` row.
    pub fn row(values: &[f64]) -> Self {
        Self { shape: vec![1, values.len()], data: values.to_vec() }
    }

    /// An `n × 1` column.
    pub fn column(values: &[f64]) -> Self {
        Self { shape: vec![values.len(), 1], data: values.to_vec() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { shape: vec![r, c], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.dims(), other.dims(), "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims(), other.dims(), "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&self, row: &Self) -> Self {
        let (n, m) = self.dims();
        assert_eq!(row.dims(), (1, m), "row broadcast mismatch");
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..m {
                out.data[i * m + j] += row.data[j];
            }
        }
        out
    }

    /// `self (n×m) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&self, col: &Self) -> Self {
        let (n, m) = self.dims();
        assert_eq!(col.dims(), (n, 1), "column broadcast mismatch");
        let mut out = self.clone();
        for i in 0..n {
            let c = col.data[i];
            for v in &mut out.data[i * m..(i + 1) * m] {
                *v *= c;
            }
        }
        out
    }

    /// Column sums, `1 × m`.
    pub fn sum_rows(&self) -> Self {
        let (n, m) = self.dims();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        Self { shape: vec![1, m], data: out }
    }

    /// Row sums, `n × 1`.
    pub fn sum_cols(&self) -> Self {
        let (n, m) = self.dims();
        let data = (0..n).map(|i| self.data[i * m..(i + 1) * m].iter().sum()).collect();
        Self { shape: vec![n, 1], data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = self.dims();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self { shape: vec![m, n], data: out }
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape size mismatch");
        Self { shape: vec![rows, cols], data: self.data.clone() }
    }

    pub fn col(&self, j: usize) -> Self {
        let (n, m) = self.dims();
        assert!(j < m, "column {j} out of range for {m} columns");
        Self { shape: vec![n, 1], data: (0..n).map(|i| self.data[i * m + j]).collect() }
    }

    pub fn hcat(parts: &[&Self]) -> Self {
        let n = parts.first().map_or(0, |p| p.rows());
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            assert_eq!(p.rows(), n, "hcat row mismatch");
            for i in 0..n {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&p.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Self { shape: vec![n, total], data: out }
    }

    /// `self (n×k) · other (k×m)`.
    pub fn matmul(&self, other: &Self) -> Self {
        let (n, k) = self.dims();
        let (k2, m) = other.dims();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &self.data, k as isize, 1, &other.data, m as isize, 1, &mut out);
        Self { shape: vec![n, m], data: out }
    }

    /// `self (n×k) · otherᵀ` where `other` is `m×k`.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        let (n, k) = self.dims();
        let (m, k2) = other.dims();
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &self.data, k as isize, 1, &other.data, 1, k as isize, &mut out);
        Self { shape: vec![n, m], data: out }
    }

    /// `selfᵀ · other` where `self` is `k×n` and `other` is `k×m`.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        let (k, n) = self.dims();
        let (k2, m) = other.dims();
        assert_eq!(k, k2, "matmul_tn inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &self.data, 1, n as isize, &other.data, m as isize, 1, &mut out);
        Self { shape: vec![n, m], data: out }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    out: &mut [f64],
) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds row/column access for matrices of
    // the asserted dimensions, and `out` holds exactly n*m contiguous entries.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}
