//! Compressed sparse row storage used by the sparse-dense products on the tape.

use crate::autodiff::Tensor;

/// CSR matrix with fixed values. Square in every use here, but not required.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                t.set(r, c, v);
            }
        }
        t
    }

    /// `self * x` for a dense right-hand side.
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        spmm_kernel(&self.row_ptr, &self.col_idx, &self.values, x)
    }

    /// `self^T * g`, the dense-side gradient of `self * x`.
    pub(crate) fn mul_dense_transposed(&self, g: &Tensor) -> Tensor {
        spmm_transposed_kernel(&self.row_ptr, &self.col_idx, &self.values, self.cols, g)
    }
}

/// Sparsity pattern of `A + I` for an undirected graph, with each entry tagged
/// by the undirected edge that produced it (`None` on the diagonal).
///
/// Noisy views reuse this pattern with per-edge weights; dropped edges keep
/// their slot with a zero value.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePattern {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub entry_edge: Vec<Option<usize>>,
}

impl EdgePattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub(crate) fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for r in 0..self.num_nodes {
            rows.extend(std::iter::repeat_n(
                r,
                self.row_ptr[r + 1] - self.row_ptr[r],
            ));
        }
        rows
    }

    /// Symmetric normalisation `D^{-1/2} (A_w + I) D^{-1/2}` for edge weights `w`.
    ///
    /// Returns the CSR values plus the inverse square-root degrees, which the
    /// backward rule needs.
    pub fn normalized_values(&self, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(weights.len(), self.num_edges);
        let mut degree = vec![1.0; self.num_nodes];
        for (r, deg) in degree.iter_mut().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if let Some(e) = self.entry_edge[k] {
                    *deg += weights[e];
                }
            }
        }
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut values = Vec::with_capacity(self.nnz());
        for r in 0..self.num_nodes {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let w = self.entry_edge[k].map_or(1.0, |e| weights[e]);
                values.push(inv_sqrt[r] * inv_sqrt[c] * w);
            }
        }
        (values, inv_sqrt)
    }

    pub fn with_values(&self, values: Vec<f64>) -> CsrMatrix {
        debug_assert_eq!(values.len(), self.nnz());
        CsrMatrix {
            rows: self.num_nodes,
            cols: self.num_nodes,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        }
    }
}

pub(crate) fn spmm_kernel(
    row_ptr: &[usize],
    col_idx: &[usize],
    values: &[f64],
    x: &Tensor,
) -> Tensor {
    let rows = row_ptr.len() - 1;
    let d = x.cols();
    let mut out = Tensor::zeros(rows, d);
    for r in 0..rows {
        let dst = out.row_mut(r);
        for k in row_ptr[r]..row_ptr[r + 1] {
            let v = values[k];
            let src = x.row(col_idx[k]);
            for (o, s) in dst.iter_mut().zip(src) {
                *o += v * s;
            }
        }
    }
    out
}

pub(crate) fn spmm_transposed_kernel(
    row_ptr: &[usize],
    col_idx: &[usize],
    values: &[f64],
    cols: usize,
    g: &Tensor,
) -> Tensor {
    let rows = row_ptr.len() - 1;
    let d = g.cols();
    let mut out = Tensor::zeros(cols, d);
    for r in 0..rows {
        for k in row_ptr[r]..row_ptr[r + 1] {
            let v = values[k];
            let c = col_idx[k];
            for j in 0..d {
                let add = v * g.get(r, j);
                let cur = out.get(c, j);
                out.set(c, j, cur + add);
            }
        }
    }
    out
}
