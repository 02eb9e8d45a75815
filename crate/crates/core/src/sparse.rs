//! Constant sparse matrices (CSR) used for graph propagation.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from row-major dense values, dropping exact zeros.
    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != rows * cols {
            return Err(shape_err("CsrMatrix::from_dense", &[rows, cols], &[dense.len()]));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..rows {
            for c in 0..cols {
                let v = dense[r * cols + c];
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Self::from_dense(*r, *c, t.data()),
            s => Err(shape_err("CsrMatrix::from_tensor", s, &[0, 0])),
        }
    }

    /// Block-diagonal stacking; block `i` occupies rows/cols after all previous blocks.
    pub fn block_diagonal(blocks: &[CsrMatrix]) -> Self {
        let mut out = Self {
            rows: 0,
            cols: 0,
            indptr: Vec::from([0usize]),
            indices: Vec::new(),
            values: Vec::new(),
        };
        for b in blocks {
            for r in 0..b.rows {
                for k in b.indptr[r]..b.indptr[r + 1] {
                    out.indices.push(out.cols + b.indices[k]);
                    out.values.push(b.values[k]);
                }
                out.indptr.push(out.indices.len());
            }
            out.rows += b.rows;
            out.cols += b.cols;
        }
        out
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

    /// Iterates `(col, value)` over row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self · x` for row-major `x` with `width` columns.
    pub(crate) fn mul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g` accumulated into `acc` (shape `cols × width`).
    pub(crate) fn mul_dense_transposed_into(&self, g: &[f64], width: usize, acc: &mut [f64]) {
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let dst = &mut acc[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}
