//! Dense row-major matrices and compressed-row sparse matrices.
//!
//! Everything in this crate is at most two dimensional: vectors are stored as
//! `n x 1` columns or `1 x n` rows, scalars as `1 x 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorError;

/// Dense `f64` matrix in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape[0] * shape[1] {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    ///
    /// Panics if the rows are ragged; intended for fixtures and small literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: [rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    /// Column vector `n x 1`.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: [values.len(), 1],
            data: values,
        }
    }

    /// Uniform initialization in `[-bound, bound]` with
    /// `bound = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            shape: [rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data,
        }
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: [rows.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Columns within a row are
    /// kept in the given order.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                debug_assert!(c < cols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row index of every stored entry, in storage order.
    pub fn row_of_entries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.indptr[r + 1] - self.indptr[r]));
        }
        out
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.indptr[r]..self.indptr[r + 1])
            .filter(|&k| self.indices[k] == c)
            .map(|k| self.values[k])
            .sum()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let v = t.get(r, c) + self.values[k];
                t.set(r, c, v);
            }
        }
        t
    }

    /// `self * dense`, using `weights` in place of the stored values when given.
    pub(crate) fn spmm_with(&self, weights: Option<&[f64]>, dense: &Tensor) -> Tensor {
        let w = weights.unwrap_or(&self.values);
        let m = dense.cols();
        let mut out = vec![0.0; self.rows * m];
        for r in 0..self.rows {
            let out_row = &mut out[r * m..(r + 1) * m];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let a = w[k];
                let d = dense.row(self.indices[k]);
                for (o, &b) in out_row.iter_mut().zip(d) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            shape: [self.rows, m],
            data: out,
        }
    }

    /// `self^T * dense`, using `weights` in place of the stored values when given.
    pub(crate) fn spmm_transpose_with(&self, weights: Option<&[f64]>, dense: &Tensor) -> Tensor {
        let w = weights.unwrap_or(&self.values);
        let m = dense.cols();
        let mut out = vec![0.0; self.cols * m];
        for r in 0..self.rows {
            let d = dense.row(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                let a = w[k];
                let c = self.indices[k];
                let out_row = &mut out[c * m..(c + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(d) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            shape: [self.cols, m],
            data: out,
        }
    }

    pub fn matmul_dense(&self, dense: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != dense.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                lhs: [self.rows, self.cols],
                rhs: dense.shape(),
            });
        }
        Ok(self.spmm_with(None, dense))
    }
}
