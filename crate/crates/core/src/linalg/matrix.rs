use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major matrix of `f32` values.
///
/// Every entry is finite and `data.len() == rows * cols` with both dimensions
/// positive. Arithmetic accumulates in `f64` and rounds once on output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// # Panics
    /// If either dimension is zero or `f` produces a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    /// Builds a matrix from `f64` values, rounding each to `f32`.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect())
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
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw storage. Callers are responsible for keeping
    /// entries finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, other)
    }

    fn zip_with(&self, other: &DenseMatrix, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, alpha: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Number of entries that are not exactly zero.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max))
    }

    /// Copies the given rows and columns, in the given order, into a new matrix.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        if rows.iter().any(|&r| r >= self.rows) || cols.iter().any(|&c| c >= self.cols) {
            return Err(Error::shape("select: index out of bounds"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let src = self.row(r);
            data.extend(cols.iter().map(|&c| src[c]));
        }
        Self::new(rows.len(), cols.len(), data)
    }
}

/// Standard matrix product with `f64` accumulation.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut acc = vec![0.0f64; n];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            if aip == 0.0 {
                continue;
            }
            let aip = f64::from(aip);
            for (slot, &bpj) in acc.iter_mut().zip(b.row(p)) {
                *slot += aip * f64::from(bpj);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    DenseMatrix::new(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            DenseMatrix::new(0, 2, vec![]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            DenseMatrix::new(1, 1, vec![f32::INFINITY]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(DenseMatrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn select_rows_and_cols() {
        let a = DenseMatrix::from_fn(3, 4, |i, j| (i * 10 + j) as f32);
        let s = a.select(&[2, 0], &[1, 3]).unwrap();
        assert_eq!(s.as_slice(), &[21.0, 23.0, 1.0, 3.0]);
        assert!(a.select(&[3], &[0]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let a = DenseMatrix::from_fn(3, 5, |i, j| (i as f32) - 2.0 * j as f32);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(4, 2), a.get(2, 4));
    }
}
