//! Small dense helpers shared by the estimators. Everything here works on
//! `k×k` or `s×s` matrices; nothing ever forms the stacked `km×km` system.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry tolerance for externally supplied covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative eigenvalue floor used for positive-definiteness checks.
pub const PD_TOL: f64 = 1e-12;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `max|A - Aᵀ| / max(1, max|A|)`.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / max_abs(a).max(1.0)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn symmetrize_mut(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Symmetric eigendecomposition; reports non-convergence instead of panicking.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    a.clone()
        .try_symmetric_eigen(EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or(Error::EigenFailure)
}

/// Scale-relative positive definiteness: `λ_min > 1e-12 · max(1, λ_max)`.
pub fn is_positive_definite(a: &DMatrix<f64>) -> Result<bool> {
    if a.nrows() == 0 {
        return Ok(true);
    }
    let eig = sym_eigen(a)?;
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    Ok(lo > PD_TOL * hi.max(1.0))
}

/// Positive semi-definiteness up to `tol · max(1, λ_max)`.
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if a.nrows() == 0 {
        return Ok(true);
    }
    let eig = sym_eigen(a)?;
    let hi = eig.eigenvalues.max().abs();
    Ok(eig.eigenvalues.min() >= -tol * hi.max(1.0))
}

/// Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
}

/// Solves `A X = B` for SPD `A`, returning `None` when `A` is not numerically PD.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(a).map(|c| c.solve(b))
}

pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    cholesky(a).map(|c| c.solve(b))
}

/// Stacks equally sized blocks vertically.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Numerical rank from singular values with the usual `max(n, p)·ε·σ_max` cutoff.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax <= 0.0 || !smax.is_finite() {
        return 0;
    }
    let cutoff = (a.nrows().max(a.ncols()) as f64) * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Deterministic pairwise sum. The tree shape depends only on `items.len()`.
pub fn pairwise_sum<T, F>(items: &[T], add: &F) -> Option<T>
where
    T: Clone,
    F: Fn(&T, &T) -> T,
{
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        n => {
            let (lo, hi) = items.split_at(n / 2);
            let a = pairwise_sum(lo, add)?;
            let b = pairwise_sum(hi, add)?;
            Some(add(&a, &b))
        }
    }
}

/// Pairwise sum of equally shaped matrices; `zeros` is returned for an empty slice.
pub fn pairwise_matrix_sum(items: &[DMatrix<f64>], zeros: DMatrix<f64>) -> DMatrix<f64> {
    pairwise_sum(items, &|a: &DMatrix<f64>, b: &DMatrix<f64>| a + b).unwrap_or(zeros)
}
