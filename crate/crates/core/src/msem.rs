//! Mean squared error matrix of the EBLUP.
//!
//! For area `a`, with `Vᵢ = Ψ + Dᵢ` and `S_a = D_a V_a⁻¹`:
//!
//! * `G₁ = Ψ V_a⁻¹ D_a`
//! * `G₂ = S_a X_a {Σ XᵢᵀVᵢ⁻¹Xᵢ}⁻¹ X_aᵀ S_aᵀ`
//! * `G₃ = m⁻² S_a [Σ Vᵢ V_a⁻¹ Vᵢ + Σ tr(Vᵢ V_a⁻¹) Vᵢ] S_aᵀ`
//! * `G₄ = −S_a Bias(Ψ) S_aᵀ`, zero for the bias-corrected estimator.
//!
//! `G₁+G₂+G₃` approximates the MSEM to `O(m^{-3/2})`; evaluating
//! `G₁+G₂+2G₃+G₄` at `Ψ̂⁺` gives an estimator that is unbiased to the same
//! order. `Ψ⁻¹` is never formed, so singular `Ψ̂⁺` is fine.

use nalgebra::DMatrix;

use crate::covariance::{self, PsiVariant};
use crate::error::{Error, Result};
use crate::gls;
use crate::linalg;
use crate::model::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct MsemReport {
    pub area_id: String,
    pub index: usize,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    pub g3: DMatrix<f64>,
    pub g4: DMatrix<f64>,
    /// `g1 + g2 + g3`
    pub approx: DMatrix<f64>,
    /// `g1 + g2 + 2 g3 + g4`
    pub estimate: DMatrix<f64>,
    pub psi_variant: PsiVariant,
    pub psi_used: DMatrix<f64>,
    /// Finite-sample estimates may be indefinite; they are reported as-is.
    pub estimate_is_psd: bool,
}

/// Quantities shared by every area for a fixed `Ψ`.
pub struct MsemContext<'a> {
    data: &'a Dataset,
    psi: DMatrix<f64>,
    info_inv: DMatrix<f64>,
    /// `T[p,q,r,s] = Σᵢ Vᵢ[p,q] Vᵢ[r,s]`, row-major over `(p,q,r,s)`.
    moment: Vec<f64>,
    bias_pr0: Option<DMatrix<f64>>,
}

/// Per-area pieces that every G term needs.
struct AreaTerms {
    vinv: DMatrix<f64>,
    shrink: DMatrix<f64>,
}

impl<'a> MsemContext<'a> {
    pub fn new(psi: &DMatrix<f64>, data: &'a Dataset) -> Result<Self> {
        let k = data.k();
        if psi.nrows() != k || psi.ncols() != k {
            return Err(Error::DimensionMismatch(format!("Psi must be {k}x{k}")));
        }
        let psi = linalg::symmetrize(psi);
        let fit_info = information(&psi, data)?;
        let info_inv = gls::information_inverse(&fit_info)?;

        let mut moment = vec![0.0; k * k * k * k];
        for a in data.areas() {
            let v = &psi + &a.d;
            let mut idx = 0;
            for p in 0..k {
                for q in 0..k {
                    let vpq = v[(p, q)];
                    for r in 0..k {
                        for s in 0..k {
                            moment[idx] += vpq * v[(r, s)];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok(Self { data, psi, info_inv, moment, bias_pr0: None })
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    fn area_terms(&self, a: usize) -> Result<AreaTerms> {
        let rec = self.data.area(a)?;
        let v = &self.psi + &rec.d;
        let k = v.nrows();
        let chol = linalg::cholesky(&v)
            .ok_or_else(|| Error::NotPsd(format!("Psi + D is not positive definite for area {}", rec.area_id)))?;
        let vinv = linalg::symmetrize(&chol.solve(&DMatrix::identity(k, k)));
        let shrink = &rec.d * &vinv;
        Ok(AreaTerms { vinv, shrink })
    }

    pub fn g1(&self, a: usize) -> Result<DMatrix<f64>> {
        let t = self.area_terms(a)?;
        let rec = self.data.area(a)?;
        Ok(linalg::symmetrize(&(&self.psi * &t.vinv * &rec.d)))
    }

    pub fn g2(&self, a: usize) -> Result<DMatrix<f64>> {
        let t = self.area_terms(a)?;
        let rec = self.data.area(a)?;
        let k = self.data.k();
        if self.data.s() == 0 {
            return Ok(DMatrix::zeros(k, k));
        }
        let sx = &t.shrink * &rec.x;
        Ok(linalg::symmetrize(&(&sx * &self.info_inv * sx.transpose())))
    }

    pub fn g3(&self, a: usize) -> Result<DMatrix<f64>> {
        let t = self.area_terms(a)?;
        let k = self.data.k();
        let m = self.data.m() as f64;
        let idx = |p: usize, q: usize, r: usize, s: usize| ((p * k + q) * k + r) * k + s;
        // Σ Vᵢ A Vᵢ + Σ tr(Vᵢ A) Vᵢ with A = V_a⁻¹
        let inner = DMatrix::from_fn(k, k, |p, s| {
            let mut acc = 0.0;
            for q in 0..k {
                for r in 0..k {
                    acc += self.moment[idx(p, q, r, s)] * t.vinv[(q, r)]
                        + self.moment[idx(q, r, p, s)] * t.vinv[(r, q)];
                }
            }
            acc
        });
        Ok(linalg::symmetrize(&(&t.shrink * inner * t.shrink.transpose() / (m * m))))
    }

    pub fn g4(&mut self, a: usize, variant: PsiVariant) -> Result<DMatrix<f64>> {
        let k = self.data.k();
        match variant {
            PsiVariant::Pr1 => Ok(DMatrix::zeros(k, k)),
            PsiVariant::Pr0 => {
                if self.bias_pr0.is_none() {
                    self.bias_pr0 = Some(covariance::psi0_bias(&self.psi, self.data)?);
                }
                let t = self.area_terms(a)?;
                let bias = self.bias_pr0.as_ref().expect("bias computed above");
                Ok(linalg::symmetrize(&(-(&t.shrink * bias * t.shrink.transpose()))))
            }
        }
    }

    /// All four terms and both combinations for area `a`.
    pub fn report(&mut self, a: usize, variant: PsiVariant) -> Result<MsemReport> {
        let g1 = self.g1(a)?;
        let g2 = self.g2(a)?;
        let g3 = self.g3(a)?;
        let g4 = self.g4(a, variant)?;
        let approx = &g1 + &g2 + &g3;
        let estimate = &g1 + &g2 + &g3 * 2.0 + &g4;
        let estimate_is_psd = linalg::is_psd(&estimate, 1e-10)?;
        let rec = self.data.area(a)?;
        Ok(MsemReport {
            area_id: rec.area_id.clone(),
            index: a,
            g1,
            g2,
            g3,
            g4,
            approx,
            estimate,
            psi_variant: variant,
            psi_used: self.psi.clone(),
            estimate_is_psd,
        })
    }
}

fn information(psi: &DMatrix<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    let s = data.s();
    let mut info = DMatrix::zeros(s, s);
    if s == 0 {
        return Ok(info);
    }
    for a in data.areas() {
        let v = psi + &a.d;
        let vinv_x = linalg::spd_solve(&v, &a.x)
            .ok_or_else(|| Error::NotPsd(format!("Psi + D is not positive definite for area {}", a.area_id)))?;
        info += a.x.tr_mul(&vinv_x);
    }
    linalg::symmetrize_mut(&mut info);
    Ok(info)
}

pub fn g1(a: usize, psi: &DMatrix<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    MsemContext::new(psi, data)?.g1(a)
}

pub fn g2(a: usize, psi: &DMatrix<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    MsemContext::new(psi, data)?.g2(a)
}

pub fn g3(a: usize, psi: &DMatrix<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    MsemContext::new(psi, data)?.g3(a)
}

pub fn g4(a: usize, psi: &DMatrix<f64>, data: &Dataset, variant: PsiVariant) -> Result<DMatrix<f64>> {
    MsemContext::new(psi, data)?.g4(a, variant)
}

/// Second-order MSEM approximation `G₁ + G₂ + G₃` at a given (true) `Ψ`.
pub fn msem_second_order(a: usize, psi: &DMatrix<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    let ctx = MsemContext::new(psi, data)?;
    Ok(ctx.g1(a)? + ctx.g2(a)? + ctx.g3(a)?)
}

/// Second-order approximation for every area.
pub fn msem_second_order_all(psi: &DMatrix<f64>, data: &Dataset) -> Result<Vec<DMatrix<f64>>> {
    let ctx = MsemContext::new(psi, data)?;
    (0..data.m()).map(|a| Ok(ctx.g1(a)? + ctx.g2(a)? + ctx.g3(a)?)).collect()
}

/// MSEM estimates for every area with all terms evaluated at `psi_plus`.
pub fn msem_reports_at(psi_plus: &DMatrix<f64>, data: &Dataset, variant: PsiVariant) -> Result<Vec<MsemReport>> {
    let mut ctx = MsemContext::new(psi_plus, data)?;
    (0..data.m()).map(|a| ctx.report(a, variant)).collect()
}

/// `G₁+G₂+2G₃+G₄` at `psi_plus` for every area, without the per-area report.
pub fn msem_estimates_at(psi_plus: &DMatrix<f64>, data: &Dataset, variant: PsiVariant) -> Result<Vec<DMatrix<f64>>> {
    let mut ctx = MsemContext::new(psi_plus, data)?;
    (0..data.m())
        .map(|a| Ok(ctx.g1(a)? + ctx.g2(a)? + ctx.g3(a)? * 2.0 + ctx.g4(a, variant)?))
        .collect()
}

/// Second-order unbiased MSEM estimate for area `a`.
pub fn msem_estimate(a: usize, data: &Dataset, variant: PsiVariant) -> Result<MsemReport> {
    data.area(a)?;
    let est = covariance::estimate_psi(data, variant)?;
    MsemContext::new(&est.projected, data)?.report(a, variant)
}

pub fn msem_estimate_all(data: &Dataset, variant: PsiVariant) -> Result<Vec<MsemReport>> {
    let est = covariance::estimate_psi(data, variant)?;
    msem_reports_at(&est.projected, data, variant)
}
