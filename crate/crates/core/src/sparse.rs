//! Compressed sparse row matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// CSR matrix with at most one stored entry per `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from coordinate triplets. Duplicate coordinates are an error.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::Structure(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
        }
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Structure(format!(
                    "duplicate entry ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        for &(r, _, _) in &sorted {
            indptr[r + 1] += 1;
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices: sorted.iter().map(|t| t.1).collect(),
            values: sorted.iter().map(|t| t.2).collect(),
        })
    }

    /// Keeps every nonzero of a dense tensor.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut indptr = Vec::with_capacity(t.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: t.rows(),
            cols: t.cols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// `(col, value)` pairs stored in row `r`, ordered by column.
    pub fn row_iter(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.rows)
            .flat_map(|r| self.row_iter(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                let slot = next[c];
                indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec {}x{} by vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row_iter(r).map(|(c, v)| v * x[c]).sum())
            .collect())
    }

    /// Sparse-dense product `self · dense`.
    pub fn matmul_dense(&self, dense: &Tensor) -> Result<Tensor> {
        if self.cols != dense.rows() {
            return Err(Error::Shape(format!(
                "spmm {}x{} by {}x{}",
                self.rows,
                self.cols,
                dense.rows(),
                dense.cols()
            )));
        }
        let mut out = Tensor::zeros(self.rows, dense.cols());
        for r in 0..self.rows {
            let out_row = out.row_mut(r);
            for (c, v) in self.row_iter(r) {
                for (o, &b) in out_row.iter_mut().zip(dense.row(c)) {
                    *o += v * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · dense` without building the transpose.
    pub fn t_matmul_dense(&self, dense: &Tensor) -> Result<Tensor> {
        if self.rows != dense.rows() {
            return Err(Error::Shape(format!(
                "spmm_t {}x{}ᵀ by {}x{}",
                self.rows,
                self.cols,
                dense.rows(),
                dense.cols()
            )));
        }
        let mut out = Tensor::zeros(self.cols, dense.cols());
        for r in 0..self.rows {
            let src = dense.row(r);
            for (c, v) in self.row_iter(r) {
                for (o, &b) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * b;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                t.set(r, c, v);
            }
        }
        t
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.transpose() == *self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
