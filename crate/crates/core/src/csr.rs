//! Compressed sparse row matrices with non-negative weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Canonical CSR storage: per-row strictly increasing columns, no duplicates.
///
/// Adjacency-like matrices (`A`, the kNN similarity graph, `A'`) all live
/// here. Values are usually non-negative; the raw kNN output is the one
/// producer that stores signed similarities (activation happens later).
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Validates and wraps raw CSR arrays.
    pub fn from_parts(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let op = "CsrMatrix::from_parts";
        if row_ptr.len() != n_rows + 1 || row_ptr[0] != 0 {
            return Err(Error::shape(op, "row_ptr must have n_rows+1 entries starting at 0"));
        }
        if row_ptr[n_rows] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::shape(op, "row_ptr[n_rows], col_idx and values disagree"));
        }
        for i in 0..n_rows {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::shape(op, format!("row_ptr decreases at row {}", i)));
            }
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape(op, format!("row {} columns not strictly increasing", i)));
            }
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::shape(op, format!("row {} column out of range", i)));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CSR value".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds a canonical matrix from per-row `(col, value)` lists. Entries are
    /// sorted; duplicate columns within a row are summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if c >= n_cols {
                    return Err(Error::shape(
                        "CsrMatrix::from_rows",
                        format!("row {} column {} >= {}", i, c, n_cols),
                    ));
                }
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_parts(n_rows, n_cols, row_ptr, col_idx, values)
    }

    /// Builds a canonical matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            if r >= n_rows {
                return Err(Error::shape(
                    "CsrMatrix::from_triplets",
                    format!("row {} >= {}", r, n_rows),
                ));
            }
            rows[r].push((c, v));
        }
        Self::from_rows(n_cols, rows)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps the non-zero entries of a dense matrix.
    pub fn from_dense(m: &DenseMatrix) -> Self {
        let rows = (0..m.rows())
            .map(|i| {
                m.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Self::from_rows(m.cols(), rows).expect("dense rows are canonical")
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Stored value at `(i, j)`, or 0.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |p| vals[p])
    }

    /// Iterates `(row, col, value)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &w)| (i, j, w))
        })
    }

    /// Row index of every stored entry.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            rows.extend(core::iter::repeat(i).take(self.row_nnz(i)));
        }
        rows
    }

    /// Same sparsity pattern with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::shape(
                "CsrMatrix::with_values",
                format!("{} values for {} stored entries", values.len(), self.nnz()),
            ));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.iter() {
            m.set(i, j, v);
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n_cols];
        for (i, j, v) in self.iter() {
            rows[j].push((i, v));
        }
        Self::from_rows(self.n_rows, rows).expect("transpose keeps canonical form")
    }

    /// Drops stored entries equal to zero.
    pub fn prune_zeros(&self) -> Self {
        let rows = (0..self.n_rows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter()
                    .zip(v)
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(&j, &w)| (j, w))
                    .collect()
            })
            .collect();
        Self::from_rows(self.n_cols, rows).expect("pruning keeps canonical form")
    }

    /// Exact sparse · dense product.
    pub fn spmm(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != x.rows() {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} · {}x{}", self.n_rows, self.n_cols, x.rows(), x.cols()),
            ));
        }
        let d = x.cols();
        let mut out = DenseMatrix::zeros(self.n_rows, d);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let out_row = out.row_mut(i);
            for (&j, &w) in cols.iter().zip(vals) {
                for (o, &xv) in out_row.iter_mut().zip(x.row(j)) {
                    *o += w * xv;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`, the adjoint of [`spmm`](Self::spmm) with respect to `x`.
    pub fn spmm_transposed(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_rows != g.rows() {
            return Err(Error::shape(
                "spmm_transposed",
                format!("({}x{})ᵀ · {}x{}", self.n_rows, self.n_cols, g.rows(), g.cols()),
            ));
        }
        let d = g.cols();
        let mut out = DenseMatrix::zeros(self.n_cols, d);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let g_row = g.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                for (o, &gv) in out.row_mut(j).iter_mut().zip(g_row) {
                    *o += w * gv;
                }
            }
        }
        Ok(out)
    }

    /// Principal submatrix on `idx` (in the given order): entry `(a, b)` of the
    /// result is `self[idx[a], idx[b]]`.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let mut pos = alloc::collections::BTreeMap::new();
        for (a, &i) in idx.iter().enumerate() {
            pos.insert(i, a);
        }
        let rows = idx
            .iter()
            .map(|&i| {
                let (c, v) = self.row(i);
                c.iter()
                    .zip(v)
                    .filter_map(|(j, &w)| pos.get(j).map(|&b| (b, w)))
                    .collect()
            })
            .collect();
        Self::from_rows(idx.len(), rows).expect("submatrix is canonical")
    }

    /// `P · self · Pᵀ` where node `i` moves to position `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); self.n_rows];
        for (i, j, v) in self.iter() {
            rows[perm[i]].push((perm[j], v));
        }
        Self::from_rows(self.n_cols, rows).expect("permutation keeps canonical form")
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && self.iter().all(|(i, j, v)| crate::math::abs(v - self.get(j, i)) <= tol)
            && self.transpose().iter().all(|(i, j, _)| self.row(i).0.binary_search(&j).is_ok())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).1.iter().sum()).collect()
    }
}
