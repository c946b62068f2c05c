//! GLS regression for a given `Ψ`, the BLUP, and its empirical versions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::covariance::{self, CovarianceEstimate, PsiVariant};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{AreaRecord, Dataset};

/// Which covariance was plugged into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiSource {
    Pr0,
    Pr1,
    Univariate,
    Known,
}

impl From<PsiVariant> for PsiSource {
    fn from(v: PsiVariant) -> Self {
        match v {
            PsiVariant::Pr0 => PsiSource::Pr0,
            PsiVariant::Pr1 => PsiSource::Pr1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsFit {
    pub beta_hat: DVector<f64>,
    /// `Σᵢ Xᵢᵀ(Ψ+Dᵢ)⁻¹Xᵢ`
    pub info_matrix: DMatrix<f64>,
    pub psi_used: DMatrix<f64>,
}

impl GlsFit {
    /// `{Σᵢ Xᵢᵀ(Ψ+Dᵢ)⁻¹Xᵢ}⁻¹`, the covariance of `β̂(Ψ)`.
    pub fn info_inverse(&self) -> Result<DMatrix<f64>> {
        information_inverse(&self.info_matrix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub area_id: String,
    pub index: usize,
    pub theta_hat: DVector<f64>,
    /// Direct estimate `y_a`.
    pub direct: DVector<f64>,
    /// Regression part `X_a β̂`.
    pub fitted: DVector<f64>,
    /// `D_a(Ψ+D_a)⁻¹`
    pub shrinkage: DMatrix<f64>,
    pub psi_source: PsiSource,
    pub psi_used: DMatrix<f64>,
}

impl Prediction {
    /// `y_a − S(y_a − X_aβ̂)` recomputed from the stored parts.
    pub fn reconstruct(&self) -> DVector<f64> {
        &self.direct - &self.shrinkage * (&self.direct - &self.fitted)
    }
}

/// One row of the Wald table for `β̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub index: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

fn check_psi(psi: &DMatrix<f64>, k: usize) -> Result<()> {
    if psi.nrows() != k || psi.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "Psi is {}x{}, expected {k}x{k}",
            psi.nrows(),
            psi.ncols()
        )));
    }
    Ok(())
}

/// Cholesky of `Ψ + D_a`. `D_a` is PD and `Ψ` PSD, so failure means `Ψ` was
/// badly indefinite.
fn marginal_factor(psi: &DMatrix<f64>, rec: &AreaRecord) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    linalg::cholesky(&(psi + &rec.d))
        .ok_or_else(|| Error::NotPsd(format!("Psi + D is not positive definite for area {}", rec.area_id)))
}

pub(crate) fn information_inverse(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = info.nrows();
    if s == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !linalg::is_positive_definite(info)? {
        return Err(Error::SingularInformation);
    }
    let inv = linalg::spd_solve(info, &DMatrix::identity(s, s)).ok_or(Error::SingularInformation)?;
    Ok(linalg::symmetrize(&inv))
}

/// `D_a(Ψ+D_a)⁻¹`, via `((Ψ+D_a)⁻¹ D_a)ᵀ`.
pub fn shrinkage_matrix(psi: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let v = psi + d;
    let vinv_d = linalg::spd_solve(&v, d).ok_or_else(|| Error::NotPsd("Psi + D is not positive definite".into()))?;
    Ok(vinv_d.transpose())
}

/// Eigenvalues of `D(Ψ+D)⁻¹`, computed from the similar symmetric matrix
/// `L⁻¹ D L⁻ᵀ` with `Ψ+D = LLᵀ`.
pub fn shrinkage_eigenvalues(psi: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DVector<f64>> {
    let chol = linalg::cholesky(&(psi + d)).ok_or_else(|| Error::NotPsd("Psi + D is not positive definite".into()))?;
    let l = chol.l();
    let linv_d = l
        .solve_lower_triangular(d)
        .ok_or_else(|| Error::NotPsd("singular Cholesky factor".into()))?;
    let sym = l
        .solve_lower_triangular(&linv_d.transpose())
        .ok_or_else(|| Error::NotPsd("singular Cholesky factor".into()))?;
    Ok(linalg::sym_eigen(&linalg::symmetrize(&sym))?.eigenvalues)
}

/// GLS estimate `β̂(Ψ) = {Σ XᵢᵀVᵢ⁻¹Xᵢ}⁻¹ Σ XᵢᵀVᵢ⁻¹yᵢ` with `Vᵢ = Ψ + Dᵢ`,
/// accumulated area by area.
pub fn gls_beta(psi: &DMatrix<f64>, data: &Dataset) -> Result<GlsFit> {
    check_psi(psi, data.k())?;
    let s = data.s();
    let mut info = DMatrix::zeros(s, s);
    let mut rhs = DVector::zeros(s);
    for a in data.areas() {
        let chol = marginal_factor(psi, a)?;
        let vinv_x = chol.solve(&a.x);
        info += a.x.tr_mul(&vinv_x);
        rhs += vinv_x.tr_mul(&a.y);
    }
    linalg::symmetrize_mut(&mut info);
    let beta_hat = if s == 0 {
        DVector::zeros(0)
    } else {
        if !linalg::is_positive_definite(&info)? {
            return Err(Error::SingularInformation);
        }
        linalg::spd_solve_vec(&info, &rhs).ok_or(Error::SingularInformation)?
    };
    Ok(GlsFit { beta_hat, info_matrix: info, psi_used: psi.clone() })
}

/// Prediction for area `a` from an existing GLS fit.
pub fn predict_with_fit(a: usize, fit: &GlsFit, data: &Dataset, source: PsiSource) -> Result<Prediction> {
    let rec = data.area(a)?;
    let shrinkage = shrinkage_matrix(&fit.psi_used, &rec.d)?;
    debug_assert!(
        shrinkage_eigenvalues(&fit.psi_used, &rec.d)
            .map(|ev| ev.iter().all(|&l| (-1e-10..=1.0 + 1e-10).contains(&l)))
            .unwrap_or(false),
        "shrinkage eigenvalues outside [0, 1]"
    );
    let fitted = &rec.x * &fit.beta_hat;
    let theta_hat = &rec.y - &shrinkage * (&rec.y - &fitted);
    Ok(Prediction {
        area_id: rec.area_id.clone(),
        index: a,
        theta_hat,
        direct: rec.y.clone(),
        fitted,
        shrinkage,
        psi_source: source,
        psi_used: fit.psi_used.clone(),
    })
}

/// BLUP `θ̂_a(Ψ) = y_a − D_a(Ψ+D_a)⁻¹{y_a − X_aβ̂(Ψ)}` for a known `Ψ`.
pub fn blup(a: usize, psi: &DMatrix<f64>, data: &Dataset) -> Result<Prediction> {
    data.area(a)?;
    let fit = gls_beta(psi, data)?;
    predict_with_fit(a, &fit, data, PsiSource::Known)
}

/// BLUPs for every area sharing one GLS fit.
pub fn blup_all(psi: &DMatrix<f64>, data: &Dataset, source: PsiSource) -> Result<(GlsFit, Vec<Prediction>)> {
    let fit = gls_beta(psi, data)?;
    let preds = (0..data.m())
        .map(|a| predict_with_fit(a, &fit, data, source))
        .collect::<Result<Vec<_>>>()?;
    Ok((fit, preds))
}

/// Result of the plug-in procedure for all areas.
#[derive(Debug, Clone, PartialEq)]
pub struct EblupFit {
    pub estimate: CovarianceEstimate,
    pub fit: GlsFit,
    pub predictions: Vec<Prediction>,
}

/// EBLUPs for all areas with `Ψ̂⁺` of the requested variant plugged in.
pub fn eblup_all(data: &Dataset, variant: PsiVariant) -> Result<EblupFit> {
    let estimate = covariance::estimate_psi(data, variant)?;
    let (fit, predictions) = blup_all(&estimate.projected, data, variant.into())?;
    Ok(EblupFit { estimate, fit, predictions })
}

/// EBLUP `θ̂_a(Ψ̂⁺)` for one area.
pub fn eblup(a: usize, data: &Dataset, variant: PsiVariant) -> Result<Prediction> {
    data.area(a)?;
    let estimate = covariance::estimate_psi(data, variant)?;
    let fit = gls_beta(&estimate.projected, data)?;
    predict_with_fit(a, &fit, data, variant.into())
}

/// Per-component scalar Fay-Herriot fit reused by the univariate predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateFit {
    /// Clamped scalar variance per component.
    pub psi: Vec<f64>,
    /// GLS fit of each component sub-model.
    pub fits: Vec<GlsFit>,
    pub components: Vec<Dataset>,
}

pub fn univariate_fit(data: &Dataset) -> Result<UnivariateFit> {
    let mut psi = Vec::with_capacity(data.k());
    let mut fits = Vec::with_capacity(data.k());
    let mut components = Vec::with_capacity(data.k());
    for j in 0..data.k() {
        let sub = data.component(j)?;
        let p = covariance::psi_pr0(&sub)?[(0, 0)].max(0.0);
        let fit = gls_beta(&DMatrix::from_element(1, 1, p), &sub)?;
        psi.push(p);
        fits.push(fit);
        components.push(sub);
    }
    Ok(UnivariateFit { psi, fits, components })
}

pub fn univariate_predict(a: usize, ufit: &UnivariateFit, data: &Dataset) -> Result<Prediction> {
    let rec = data.area(a)?;
    let k = data.k();
    let mut fitted = DVector::zeros(k);
    let mut shrink = DVector::zeros(k);
    for j in 0..k {
        let sub = &ufit.components[j].areas()[a];
        fitted[j] = (&sub.x * &ufit.fits[j].beta_hat)[0];
        let d = sub.d[(0, 0)];
        shrink[j] = d / (ufit.psi[j] + d);
    }
    let shrinkage = DMatrix::from_diagonal(&shrink);
    let theta_hat = &rec.y - &shrinkage * (&rec.y - &fitted);
    Ok(Prediction {
        area_id: rec.area_id.clone(),
        index: a,
        theta_hat,
        direct: rec.y.clone(),
        fitted,
        shrinkage,
        psi_source: PsiSource::Univariate,
        psi_used: DMatrix::from_diagonal(&DVector::from_vec(ufit.psi.clone())),
    })
}

/// Stacks `k` independent scalar EBLUPs for area `a`.
pub fn univariate_eblup(a: usize, data: &Dataset) -> Result<Prediction> {
    data.area(a)?;
    let ufit = univariate_fit(data)?;
    univariate_predict(a, &ufit, data)
}

pub fn univariate_eblup_all(data: &Dataset) -> Result<Vec<Prediction>> {
    let ufit = univariate_fit(data)?;
    (0..data.m()).map(|a| univariate_predict(a, &ufit, data)).collect()
}

/// Two-sided normal p-value.
pub fn normal_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Wald z-tests of `β_j = 0` using the diagonal of the inverse information.
pub fn beta_inference(fit: &GlsFit) -> Result<Vec<CoefficientRow>> {
    let inv = fit.info_inverse()?;
    Ok(fit
        .beta_hat
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let se = inv[(j, j)].sqrt();
            let z = b / se;
            CoefficientRow { index: j, estimate: b, std_error: se, z, p_value: normal_p_value(z) }
        })
        .collect())
}
