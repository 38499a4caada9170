//! Compressed sparse row matrices for the adjacency operators.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Sparse matrix in CSR layout. Values within a row are stored with strictly
/// increasing column indices, so construction from triplets is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicate positions are summed
    /// and explicit zeros are dropped.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<CsrMatrix> {
        let mut sorted: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(i, j, v) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::Shape {
                    op: "csr_from_triplets",
                    details: format!("entry ({i}, {j}) outside {n_rows}x{n_cols}"),
                });
            }
            sorted.push((i, j, v));
        }
        sorted.sort_by_key(|&(i, j, _)| (i, j));

        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut k = 0;
        while k < sorted.len() {
            let (i, j, mut v) = sorted[k];
            k += 1;
            while k < sorted.len() && sorted[k].0 == i && sorted[k].1 == j {
                v += sorted[k].2;
                k += 1;
            }
            if v != 0.0 {
                row_ptr[i + 1] += 1;
                col_idx.push(j);
                values.push(v);
            }
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> CsrMatrix {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out.push((i, j, v));
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let flipped: Vec<(usize, usize, f64)> =
            self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, &flipped)
            .expect("transpose preserves bounds")
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Dense row-major copy, for small-graph oracles and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for (i, j, v) in self.triplets() {
            out[i * self.n_cols + j] = v;
        }
        out
    }

    /// Sparse * dense product. `rhs` is row-major with `rhs_cols` columns and
    /// `self.n_cols` rows; the result has `self.n_rows` rows.
    pub fn mul_dense(&self, rhs: &[f64], rhs_cols: usize) -> Result<Vec<f64>> {
        if rhs.len() != self.n_cols * rhs_cols {
            return Err(Error::Shape {
                op: "spmm",
                details: format!(
                    "rhs has {} values, expected {}x{}",
                    rhs.len(),
                    self.n_cols,
                    rhs_cols
                ),
            });
        }
        let mut out = vec![0.0; self.n_rows * rhs_cols];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let orow = &mut out[i * rhs_cols..(i + 1) * rhs_cols];
            for (&j, &v) in cols.iter().zip(vals) {
                let rrow = &rhs[j * rhs_cols..(j + 1) * rhs_cols];
                for (o, &r) in orow.iter_mut().zip(rrow) {
                    *o += v * r;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut worst = 0.0f64;
        for (i, j, v) in self.triplets() {
            worst = worst.max((v - t.get(i, j)).abs());
        }
        worst
    }
}
