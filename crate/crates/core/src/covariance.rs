//! Moment estimation of the random-effect covariance `Ψ`.
//!
//! `Ψ̂₀` averages the OLS residual outer products minus the sampling
//! covariances. Its `O(1/m)` bias has a closed form, and `Ψ̂₁` subtracts that
//! bias evaluated at `Ψ̂₀` (one plug-in step, no iteration). Either estimate may
//! be indefinite; [`psd_project`] clamps negative eigenvalues to zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiVariant {
    Pr0,
    Pr1,
}

impl PsiVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            PsiVariant::Pr0 => "pr0",
            PsiVariant::Pr1 => "pr1",
        }
    }
}

impl std::str::FromStr for PsiVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pr0" => Ok(PsiVariant::Pr0),
            "pr1" => Ok(PsiVariant::Pr1),
            other => Err(Error::InvalidConfig(format!("unknown psi variant '{other}'"))),
        }
    }
}

/// Eigen-clamped projection of a symmetric matrix onto the PSD cone.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdProjection {
    pub projected: DMatrix<f64>,
    /// Eigenvalues of the input, ascending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, columns matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// `truncated[j]` is set when eigenvalue `j` was negative and clamped.
    pub truncated: Vec<bool>,
}

impl PsdProjection {
    pub fn any_truncated(&self) -> bool {
        self.truncated.iter().any(|&t| t)
    }
}

/// An estimate of `Ψ` before and after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub variant: PsiVariant,
    pub raw: DMatrix<f64>,
    pub projected: DMatrix<f64>,
    pub eigenvalues_raw: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub truncated: Vec<bool>,
}

impl CovarianceEstimate {
    pub fn any_truncated(&self) -> bool {
        self.truncated.iter().any(|&t| t)
    }

    /// Correlation matrix implied by the projected estimate. Rows/columns with
    /// zero variance get zero off-diagonal correlation and unit diagonal.
    pub fn correlation(&self) -> DMatrix<f64> {
        correlation_matrix(&self.projected)
    }
}

pub fn correlation_matrix(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let k = cov.nrows();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            return 1.0;
        }
        let denom = (cov[(i, i)] * cov[(j, j)]).sqrt();
        if denom > 0.0 {
            cov[(i, j)] / denom
        } else {
            0.0
        }
    })
}

/// Ordinary least squares on the stacked design, `(XᵀX)⁻¹Xᵀy`.
pub fn ols_beta(data: &Dataset) -> Result<DVector<f64>> {
    let s = data.s();
    if s == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut xty = DVector::zeros(s);
    for a in data.areas() {
        xty += a.x.tr_mul(&a.y);
    }
    let beta = data.xtx_inv() * xty;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficientX { rank: linalg::numerical_rank(&data.stacked_x()), s });
    }
    Ok(beta)
}

/// Prasad-Rao moment estimator `(1/m) Σ {(yᵢ − Xᵢβ̃)(yᵢ − Xᵢβ̃)ᵀ − Dᵢ}`.
pub fn psi_pr0(data: &Dataset) -> Result<DMatrix<f64>> {
    let beta = ols_beta(data)?;
    let k = data.k();
    let mut acc = DMatrix::zeros(k, k);
    for a in data.areas() {
        let r = &a.y - &a.x * &beta;
        acc += &r * r.transpose() - &a.d;
    }
    acc /= data.m() as f64;
    linalg::symmetrize_mut(&mut acc);
    Ok(acc)
}

/// First-order bias of `Ψ̂₀` as a function of the true `Ψ`:
///
/// ```text
///  (1/m) Σᵢ Xᵢ A {Σⱼ Xⱼᵀ(Ψ+Dⱼ)Xⱼ} A Xᵢᵀ − (1/m) Σᵢ (Ψ+Dᵢ)Pᵢ − (1/m) Σᵢ Pᵢ(Ψ+Dᵢ)
/// ```
///
/// with `A = (XᵀX)⁻¹` and `Pᵢ = Xᵢ A Xᵢᵀ`.
pub fn psi0_bias(psi: &DMatrix<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    let k = data.k();
    if psi.nrows() != k || psi.ncols() != k {
        return Err(Error::DimensionMismatch(format!("Psi must be {k}x{k}")));
    }
    let s = data.s();
    if s == 0 {
        return Ok(DMatrix::zeros(k, k));
    }
    let m = data.m() as f64;
    let a_inv = data.xtx_inv();

    let mut middle = DMatrix::zeros(s, s);
    for a in data.areas() {
        let v = psi + &a.d;
        middle += a.x.transpose() * v * &a.x;
    }
    let sandwich = a_inv * middle * a_inv;

    let mut acc = DMatrix::zeros(k, k);
    for a in data.areas() {
        let v = psi + &a.d;
        let p = &a.x * a_inv * a.x.transpose();
        acc += &a.x * &sandwich * a.x.transpose() - &v * &p - &p * &v;
    }
    acc /= m;
    linalg::symmetrize_mut(&mut acc);
    Ok(acc)
}

/// One-step bias-corrected estimator `Ψ̂₁ = Ψ̂₀ − Bias(Ψ̂₀)`.
pub fn psi_pr1(data: &Dataset) -> Result<DMatrix<f64>> {
    let psi0 = psi_pr0(data)?;
    let bias = psi0_bias(&psi0, data)?;
    let mut out = psi0 - bias;
    linalg::symmetrize_mut(&mut out);
    Ok(out)
}

/// Clamps negative eigenvalues of a symmetric matrix to zero. A PSD input is
/// returned unchanged.
pub fn psd_project(raw: &DMatrix<f64>) -> Result<PsdProjection> {
    if raw.nrows() != raw.ncols() {
        return Err(Error::DimensionMismatch("projection needs a square matrix".into()));
    }
    let sym = linalg::symmetrize(raw);
    let eig = linalg::sym_eigen(&sym)?;

    // nalgebra returns eigenpairs unordered; sort ascending for stable metadata
    let k = sym.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_fn(k, |i, _| eig.eigenvalues[order[i]]);
    let eigenvectors = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let truncated: Vec<bool> = eigenvalues.iter().map(|&l| l < 0.0).collect();

    let projected = if truncated.iter().any(|&t| t) {
        let clamped = DMatrix::from_diagonal(&eigenvalues.map(|l| l.max(0.0)));
        let mut p = &eigenvectors * clamped * eigenvectors.transpose();
        linalg::symmetrize_mut(&mut p);
        p
    } else {
        sym
    };
    Ok(PsdProjection { projected, eigenvalues, eigenvectors, truncated })
}

/// Computes `Ψ̂₀` or `Ψ̂₁` and its PSD projection.
pub fn estimate_psi(data: &Dataset, variant: PsiVariant) -> Result<CovarianceEstimate> {
    let raw = match variant {
        PsiVariant::Pr0 => psi_pr0(data)?,
        PsiVariant::Pr1 => psi_pr1(data)?,
    };
    let proj = psd_project(&raw)?;
    Ok(CovarianceEstimate {
        variant,
        raw,
        projected: proj.projected,
        eigenvalues_raw: proj.eigenvalues,
        eigenvectors: proj.eigenvectors,
        truncated: proj.truncated,
    })
}

/// Univariate Prasad-Rao variance for response component `j`, clamped at zero.
pub fn univariate_psi(data: &Dataset, j: usize) -> Result<f64> {
    let sub = data.component(j)?;
    Ok(psi_pr0(&sub)?[(0, 0)].max(0.0))
}
