//! Truncated PCA used to bring every graph's raw features to the shared width.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::math;

/// Default unified feature width.
pub const DEFAULT_UNIFIED_DIM: usize = 50;

/// Raw widths up to this use a full Jacobi eigensolve of the covariance.
pub const JACOBI_MAX_DIM: usize = 512;

/// A frozen projection: `(x - mean) · basis`, zero-padded to `target_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBasis {
    pub mean: Vec<f64>,
    /// `d' x min(d, d')`, orthonormal columns.
    pub basis: DenseMatrix,
    /// Non-increasing, non-negative.
    pub explained_variance: Vec<f64>,
    pub target_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenSolver {
    /// Jacobi up to [`JACOBI_MAX_DIM`], power iteration beyond.
    Auto,
    Jacobi,
    PowerIteration,
}

/// Fits a truncated PCA with target width `d`. The covariance uses the
/// `n - 1` denominator (`1` when `n = 1`).
pub fn fit_pca(x: &DenseMatrix, d: usize, center: bool) -> Result<ProjectionBasis> {
    fit_pca_with(x, d, center, EigenSolver::Auto)
}

pub fn fit_pca_with(x: &DenseMatrix, d: usize, center: bool, solver: EigenSolver) -> Result<ProjectionBasis> {
    if d == 0 {
        return Err(Error::Config("PCA target dimension must be positive".into()));
    }
    if x.rows() == 0 {
        return Err(Error::Precondition("PCA needs at least one row".into()));
    }
    let raw = x.cols();
    let mean = if center { x.column_means() } else { vec![0.0; raw] };
    let xc = centered(x, &mean);
    let keep = d.min(raw);
    let denom = (x.rows().max(2) - 1) as f64;
    let use_jacobi = match solver {
        EigenSolver::Auto => raw <= JACOBI_MAX_DIM,
        EigenSolver::Jacobi => true,
        EigenSolver::PowerIteration => false,
    };
    let (values, mut vectors) = if use_jacobi {
        let cov = xc.t_matmul(&xc)?.scale(1.0 / denom);
        let (vals, vecs) = symmetric_eigen(&cov);
        let cols: Vec<usize> = (0..keep).collect();
        (vals[..keep].to_vec(), select_columns(&vecs, &cols))
    } else {
        power_deflation(&xc, keep, denom)
    };
    fix_signs(&mut vectors);
    Ok(ProjectionBasis {
        mean,
        basis: vectors,
        explained_variance: values.into_iter().map(|v| v.max(0.0)).collect(),
        target_dim: d,
    })
}

/// Applies a fitted basis.
pub fn project(x: &DenseMatrix, basis: &ProjectionBasis) -> Result<DenseMatrix> {
    if x.cols() != basis.mean.len() {
        return Err(Error::shape(
            "project",
            format!("{} columns vs basis for {}", x.cols(), basis.mean.len()),
        ));
    }
    let out = centered(x, &basis.mean).matmul(&basis.basis)?;
    Ok(out.pad_cols(basis.target_dim))
}

fn centered(x: &DenseMatrix, mean: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - mean[j])
}

fn select_columns(m: &DenseMatrix, cols: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), cols.len(), |i, j| m.get(i, cols[j]))
}

/// Each column's largest-magnitude entry (first on ties) is made positive.
fn fix_signs(v: &mut DenseMatrix) {
    for j in 0..v.cols() {
        let mut best = 0usize;
        for i in 0..v.rows() {
            if math::abs(v.get(i, j)) > math::abs(v.get(best, j)) {
                best = i;
            }
        }
        if v.rows() > 0 && v.get(best, j) < 0.0 {
            for i in 0..v.rows() {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices. Returns eigenvalues in
/// descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = a.rows();
    let mut a = a.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = a.frobenius_norm();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if math::sqrt(off) <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + math::sqrt(theta * theta + 1.0))
                } else {
                    -1.0 / (-theta + math::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    (values, select_columns(&v, &order))
}

/// Top-`k` eigenpairs of `xcᵀ xc / denom` by power iteration with deflation,
/// never forming the covariance.
fn power_deflation(xc: &DenseMatrix, k: usize, denom: f64) -> (Vec<f64>, DenseMatrix) {
    let dim = xc.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9ca);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    let apply = |v: &[f64]| -> Vec<f64> {
        let proj: Vec<f64> = (0..xc.rows()).map(|i| dot(xc.row(i), v)).collect();
        let mut out = vec![0.0; dim];
        for (i, &p) in proj.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(xc.row(i)) {
                *o += p * x;
            }
        }
        out.iter_mut().for_each(|o| *o /= denom);
        out
    };
    for _ in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        orthogonalize(&mut v, &found);
        let mut lambda = 0.0;
        if normalize(&mut v) {
            for _ in 0..5000 {
                let mut w = apply(&v);
                orthogonalize(&mut w, &found);
                lambda = math::sqrt(dot(&w, &w));
                if lambda < 1e-300 || !normalize(&mut w) {
                    lambda = 0.0;
                    break;
                }
                let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                v = w;
                if delta < 1e-24 {
                    break;
                }
            }
        }
        if lambda == 0.0 {
            v = complement_vector(&found, dim);
        }
        found.push(v);
        values.push(lambda);
    }
    let basis = DenseMatrix::from_fn(dim, k, |i, j| found[j][i]);
    (values, basis)
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes of Gram-Schmidt for numerical orthogonality
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = math::sqrt(dot(v, v));
    if n < 1e-150 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// A unit vector orthogonal to `basis`, from the first standard basis vector that survives.
fn complement_vector(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for e in 0..dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        orthogonalize(&mut v, basis);
        if math::sqrt(dot(&v, &v)) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
    vec![0.0; dim]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn orthonormality_error(b: &DenseMatrix) -> f64 {
        b.t_matmul(b).unwrap().max_abs_diff(&DenseMatrix::identity(b.cols()))
    }

    /// Principal angle cosines between column spaces via nalgebra SVD of `Q1ᵀ Q2`.
    fn min_principal_cosine(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        let m = a.t_matmul(b).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        na.singular_values().iter().fold(1.0f64, |acc, v| acc.min(*v))
    }

    fn reconstruction_error(x: &DenseMatrix, p: &ProjectionBasis) -> f64 {
        let xc = centered(x, &p.mean);
        let rec = xc.matmul(&p.basis).unwrap().matmul(&p.basis.transpose()).unwrap();
        xc.sub(&rec).unwrap().frobenius_norm()
    }

    /// Oracle: nalgebra SVD of the centered data; optimal rank-d error is the
    /// tail of the singular values.
    fn svd_oracle(x: &DenseMatrix, d: usize) -> (DenseMatrix, f64) {
        let mean = x.column_means();
        let xc = centered(x, &mean);
        let na = nalgebra::DMatrix::from_row_slice(xc.rows(), xc.cols(), xc.data());
        let svd = na.svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let basis = DenseMatrix::from_fn(xc.cols(), d, |i, j| vt[(order[j], i)]);
        let tail: f64 = order[d..].iter().map(|&i| svd.singular_values[i].powi(2)).sum();
        (basis, tail.sqrt())
    }

    #[test]
    fn zero_dimension_is_config_error() {
        assert!(matches!(fit_pca(&DenseMatrix::zeros(3, 2), 0, true), Err(Error::Config(_))));
    }

    #[test]
    fn rank_one_data_projects_to_centered_column() {
        let c = [1.0, 4.0, -2.0, 0.5, 3.0];
        let x = DenseMatrix::from_fn(5, 3, |i, j| if j == 1 { c[i] } else { 0.0 });
        let p = fit_pca(&x, 1, true).unwrap();
        let z = project(&x, &p).unwrap();
        let mean = c.iter().sum::<f64>() / 5.0;
        // basis column is +e_1 under the sign convention
        for i in 0..5 {
            assert!((z.get(i, 0) - (c[i] - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_10x6_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 10, 6);
        let p = fit_pca(&x, 3, true).unwrap();
        let (oracle, oracle_err) = svd_oracle(&x, 3);
        assert!(orthonormality_error(&p.basis) < 1e-9);
        assert!(min_principal_cosine(&p.basis, &oracle) > 1.0 - 1e-12);
        assert!((reconstruction_error(&x, &p) - oracle_err).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_agrees_with_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 30, 9);
        let a = fit_pca_with(&x, 4, true, EigenSolver::Jacobi).unwrap();
        let b = fit_pca_with(&x, 4, true, EigenSolver::PowerIteration).unwrap();
        for (u, v) in a.explained_variance.iter().zip(&b.explained_variance) {
            assert!((u - v).abs() < 1e-8, "{} vs {}", u, v);
        }
        assert!(a.basis.max_abs_diff(&b.basis) < 1e-5);
    }

    #[test]
    fn projection_centers_and_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 12, 4);
        let p = fit_pca(&x, 6, true).unwrap();
        let z = project(&x, &p).unwrap();
        assert_eq!(z.cols(), 6);
        for m in z.column_means() {
            assert!(m.abs() < 1e-9);
        }
        for i in 0..12 {
            assert_eq!(&z.row(i)[4..], &[0.0, 0.0]);
        }
        let mean_row = DenseMatrix::row_vector(&p.mean);
        assert!(project(&mean_row, &p).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        assert!(project(&DenseMatrix::zeros(2, 3), &p).is_err());
    }

    #[test]
    fn wide_input_goes_to_target_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 20, 600);
        let p = fit_pca(&x, DEFAULT_UNIFIED_DIM, true).unwrap();
        assert_eq!(project(&x, &p).unwrap().cols(), DEFAULT_UNIFIED_DIM);
        assert!(orthonormality_error(&p.basis) < 1e-9);
    }

    #[test]
    fn zero_variance_gives_orthonormal_basis_and_zero_variance() {
        let x = DenseMatrix::filled(4, 3, 2.5);
        for solver in [EigenSolver::Jacobi, EigenSolver::PowerIteration] {
            let p = fit_pca_with(&x, 2, true, solver).unwrap();
            assert!(orthonormality_error(&p.basis) < 1e-12);
            assert!(p.explained_variance.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn explained_variance_bounded_by_total_and_offset_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let (n, c) = (3 + trial % 9, 2 + trial % 7);
            let x = random(&mut rng, n, c);
            let xc = centered(&x, &x.column_means());
            let total = xc.data().iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
            let d = 1 + trial % c;
            let p = fit_pca(&x, d, true).unwrap();
            let explained: f64 = p.explained_variance.iter().sum();
            assert!(explained <= total + 1e-9);
            assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
            let full = fit_pca(&x, c, true).unwrap();
            assert!((full.explained_variance.iter().sum::<f64>() - total).abs() < 1e-9);

            let offset: Vec<f64> = (0..c).map(|j| 3.0 * j as f64 - 1.0).collect();
            let shifted = DenseMatrix::from_fn(n, c, |i, j| x.get(i, j) + offset[j]);
            let ps = fit_pca(&shifted, d, true).unwrap();
            let z = project(&x, &p).unwrap();
            let zs = project(&shifted, &ps).unwrap();
            assert!(z.max_abs_diff(&zs) < 1e-8);

            // optimality of the reconstruction error (instances ≤ 12x8)
            let (_, oracle_err) = svd_oracle(&x, d.min(n.min(c)));
            if d <= n.min(c) {
                assert!((reconstruction_error(&x, &p) - oracle_err).abs() < 1e-8);
            }
        }
    }
}
