//! CSR sparse matrices and the graph propagation operators built from them.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Sparse matrix in CSR form with per-entry `f64` weights. Square instances
/// built from a graph act as propagation operators; rectangular instances
/// hold sparse feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    /// Reduce each output element in value-sorted order. Graph operators set
    /// this so node relabeling permutes products without changing sums;
    /// feature matrices skip it since their column order never changes.
    ordered_reduction: bool,
}

impl CsrMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `r` as `(column, value)` pairs.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[r]..self.offsets[r + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Build from already-sorted per-row entries.
    fn from_rows(
        rows: usize,
        cols: usize,
        entries: Vec<Vec<(usize, f64)>>,
        ordered_reduction: bool,
    ) -> CsrMatrix {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for row in &entries {
            for &(c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            offsets.push(col_indices.len());
        }
        CsrMatrix {
            rows,
            cols,
            offsets,
            col_indices,
            values,
            ordered_reduction,
        }
    }

    /// Sparse view of a dense matrix, keeping entries with `|x| > 0`.
    pub fn from_dense(t: &Tensor) -> CsrMatrix {
        let (n, f) = (t.rows(), t.cols());
        let entries = (0..n)
            .map(|i| {
                t.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(n, f, entries, false)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.data_mut()[r * self.cols + c] = v;
            }
        }
        out
    }

    /// `self @ b` with a dense right operand.
    ///
    /// With `ordered_reduction`, each output element accumulates its
    /// contributions in value-sorted order, so the result is invariant to
    /// how the row's entries are ordered; relabeling graph nodes permutes
    /// products without changing them, which keeps encoder outputs exactly
    /// permutation-equivariant.
    pub fn matmul_dense(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.rows() {
            return Err(Error::shape(format!(
                "spmm: {}x{} @ {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let n = b.cols();
        let mut out = vec![0.0; self.rows * n];
        out.par_chunks_mut(n).enumerate().for_each_init(
            Vec::new,
            |scratch: &mut Vec<f64>, (r, row)| {
                let lo = self.offsets[r];
                let hi = self.offsets[r + 1];
                // sums of up to two terms are order-invariant already
                if !self.ordered_reduction || hi - lo <= 2 {
                    for idx in lo..hi {
                        let v = self.values[idx];
                        let b_row =
                            &b.data()[self.col_indices[idx] * n..(self.col_indices[idx] + 1) * n];
                        for (o, &bv) in row.iter_mut().zip(b_row) {
                            *o += v * bv;
                        }
                    }
                    return;
                }
                for (j, o) in row.iter_mut().enumerate() {
                    scratch.clear();
                    for idx in lo..hi {
                        scratch.push(self.values[idx] * b.data()[self.col_indices[idx] * n + j]);
                    }
                    sort_by_value(scratch);
                    *o = scratch.iter().sum();
                }
            },
        );
        Tensor::from_vec(&[self.rows, n], out)
    }

    /// `selfᵀ @ b`, used by the tape's spmm backward pass.
    pub fn transpose_matmul_dense(&self, b: &Tensor) -> Result<Tensor> {
        if self.rows != b.rows() {
            return Err(Error::shape(format!(
                "spmm backward: {}x{}ᵀ @ {}x{}",
                self.rows,
                self.cols,
                b.rows(),
                b.cols()
            )));
        }
        let n = b.cols();
        let mut out = Tensor::zeros(&[self.cols, n]);
        for r in 0..self.rows {
            let b_row = &b.data()[r * n..(r + 1) * n];
            for (c, v) in self.row_entries(r) {
                let o = &mut out.data_mut()[c * n..(c + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b_row) {
                    *ov += v * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn ordered_reduction(&self) -> bool {
        self.ordered_reduction
    }

    /// Same structure with every stored value passed through `f`.
    pub fn map_values(&self, f: &mut impl FnMut(f64) -> f64) -> CsrMatrix {
        CsrMatrix {
            values: self.values.iter().map(|&v| f(v)).collect(),
            offsets: self.offsets.clone(),
            col_indices: self.col_indices.clone(),
            ..*self
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                let lo = self.offsets[c];
                let hi = self.offsets[c + 1];
                match self.col_indices[lo..hi].binary_search(&r) {
                    Ok(pos) => {
                        if (self.values[lo + pos] - v).abs() > tol {
                            return false;
                        }
                    }
                    Err(_) => return false,
                }
            }
        }
        true
    }
}

/// Canonical total order on the contributions of one reduction, via the
/// monotone bit mapping of IEEE doubles (same order as `f64::total_cmp`).
fn sort_by_value(values: &mut [f64]) {
    const SIGN: u64 = 1 << 63;
    let key = |v: f64| {
        let b = v.to_bits();
        if b & SIGN != 0 {
            !b
        } else {
            b | SIGN
        }
    };
    if values.len() <= 12 {
        // insertion sort: reductions are mostly over a handful of neighbors
        for i in 1..values.len() {
            let mut j = i;
            while j > 0 && key(values[j - 1]) > key(values[j]) {
                values.swap(j - 1, j);
                j -= 1;
            }
        }
    } else {
        values.sort_unstable_by_key(|&v| key(v));
    }
}

/// GCN propagation operator `D̂^{-1/2}(A+I)D̂^{-1/2}`: arc `(u, v)` of `A+I`
/// (diagonal included) gets weight `1/sqrt((deg(u)+1)(deg(v)+1))`.
pub fn normalized_adjacency(g: &Graph) -> CsrMatrix {
    let n = g.num_nodes();
    let w = |u: usize, v: usize| 1.0 / (((g.degree(u) + 1) * (g.degree(v) + 1)) as f64).sqrt();
    let entries = (0..n)
        .map(|u| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(g.degree(u) + 1);
            let mut placed_diag = false;
            for &v in g.neighbors(u) {
                if !placed_diag && v > u {
                    row.push((u, w(u, u)));
                    placed_diag = true;
                }
                row.push((v, w(u, v)));
            }
            if !placed_diag {
                row.push((u, w(u, u)));
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(n, n, entries, true)
}

/// Neighbor-mean operator: row `u` weights each neighbor `1/deg(u)`;
/// isolated nodes get an all-zero row.
pub fn mean_adjacency(g: &Graph) -> CsrMatrix {
    let n = g.num_nodes();
    let entries = (0..n)
        .map(|u| {
            let d = g.degree(u);
            if d == 0 {
                return Vec::new();
            }
            let w = 1.0 / d as f64;
            g.neighbors(u).iter().map(|&v| (v, w)).collect()
        })
        .collect();
    CsrMatrix::from_rows(n, n, entries, true)
}

/// Neighbor-sum operator with self term, `A + I` with unit weights.
pub fn sum_adjacency_with_self(g: &Graph) -> CsrMatrix {
    let n = g.num_nodes();
    let entries = (0..n)
        .map(|u| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(g.degree(u) + 1);
            let mut placed_diag = false;
            for &v in g.neighbors(u) {
                if !placed_diag && v > u {
                    row.push((u, 1.0));
                    placed_diag = true;
                }
                row.push((v, 1.0));
            }
            if !placed_diag {
                row.push((u, 1.0));
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(n, n, entries, true)
}
