//! Post-processing primitives for learned adjacency matrices: symmetrize with
//! ReLU activation, then add self-loops and apply symmetric degree
//! normalization. Dense and CSR variants compute the same thing.

use alloc::format;
use alloc::vec::Vec;

use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::math;

/// Degree clamp applied before the inverse square root.
pub const DEFAULT_DEGREE_EPS: f64 = 1e-12;

/// Tolerance used to reject asymmetric inputs to normalization.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `(relu(A) + relu(A)ᵀ) / 2`.
pub fn symmetrize_activate_dense(a: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape(
            "symmetrize_activate",
            format!("{}x{} is not square", a.rows(), a.cols()),
        ));
    }
    Ok(DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| {
        (relu(a.get(i, j)) + relu(a.get(j, i))) / 2.0
    }))
}

/// Sparse `(relu(A) + relu(A)ᵀ) / 2` over the union of the stored patterns of
/// `A` and `Aᵀ`. Entries that end up zero are kept in the pattern.
pub fn symmetrize_activate(a: &CsrMatrix) -> Result<CsrMatrix> {
    if !a.is_square() {
        return Err(Error::shape(
            "symmetrize_activate",
            format!("{}x{} is not square", a.n_rows(), a.n_cols()),
        ));
    }
    let mut rows: Vec<Vec<(usize, f64)>> = alloc::vec![Vec::new(); a.n_rows()];
    for (i, j, v) in a.iter() {
        let half = relu(v) / 2.0;
        rows[i].push((j, half));
        rows[j].push((i, half));
    }
    CsrMatrix::from_rows(a.n_cols(), rows)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`, clamped below by `eps`.
pub fn degree_normalize_selfloops_dense(a: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape(
            "degree_normalize_selfloops",
            format!("{}x{} is not square", a.rows(), a.cols()),
        ));
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Precondition(
            "degree normalization requires a symmetric matrix".into(),
        ));
    }
    let n = a.rows();
    let mut looped = a.clone();
    for i in 0..n {
        looped.set(i, i, a.get(i, i) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / math::sqrt(looped.row(i).iter().sum::<f64>().max(eps)))
        .collect();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        // product of the two scales first keeps the result exactly symmetric
        looped.get(i, j) * (inv_sqrt[i] * inv_sqrt[j])
    }))
}

/// Adds `1.0` on the diagonal (inserting it where absent).
pub fn add_self_loops(a: &CsrMatrix) -> Result<CsrMatrix> {
    if !a.is_square() {
        return Err(Error::shape("add_self_loops", "matrix is not square"));
    }
    let rows = (0..a.n_rows())
        .map(|i| {
            let (c, v) = a.row(i);
            let mut row: Vec<(usize, f64)> = c.iter().copied().zip(v.iter().copied()).collect();
            row.push((i, 1.0));
            row
        })
        .collect();
    CsrMatrix::from_rows(a.n_cols(), rows)
}

/// Sparse counterpart of [`degree_normalize_selfloops_dense`].
pub fn degree_normalize_selfloops(a: &CsrMatrix, eps: f64) -> Result<CsrMatrix> {
    if !a.is_square() {
        return Err(Error::shape("degree_normalize_selfloops", "matrix is not square"));
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Precondition(
            "degree normalization requires a symmetric matrix".into(),
        ));
    }
    let looped = add_self_loops(a)?;
    let inv_sqrt: Vec<f64> = looped
        .row_sums()
        .into_iter()
        .map(|d| 1.0 / math::sqrt(d.max(eps)))
        .collect();
    let values = looped
        .iter()
        .map(|(i, j, v)| v * (inv_sqrt[i] * inv_sqrt[j]))
        .collect();
    looped.with_values(values)
}
