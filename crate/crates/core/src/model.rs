//! Area-level records and the validated dataset built from them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// One small area: direct estimate `y` (length k), covariates `x` (k×s) and
/// the known sampling covariance `d` (k×k).
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRecord {
    pub area_id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl AreaRecord {
    pub fn new(area_id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>, d: DMatrix<f64>) -> Self {
        Self { area_id: area_id.into(), y, x, d }
    }
}

/// A validated collection of `m ≥ 2` areas sharing dimensions `k` and `s`.
///
/// Construction goes through [`validate_dataset`], so every `D_i` is symmetric
/// positive definite and the stacked design has full column rank. Area order
/// is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    areas: Vec<AreaRecord>,
    k: usize,
    s: usize,
    xtx_inv: DMatrix<f64>,
}

impl Dataset {
    pub fn areas(&self) -> &[AreaRecord] {
        &self.areas
    }

    pub fn area(&self, a: usize) -> Result<&AreaRecord> {
        self.areas.get(a).ok_or(Error::AreaOutOfRange { index: a, m: self.areas.len() })
    }

    pub fn m(&self) -> usize {
        self.areas.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// `(XᵀX)⁻¹` for the stacked design.
    pub fn xtx_inv(&self) -> &DMatrix<f64> {
        &self.xtx_inv
    }

    pub fn into_areas(self) -> Vec<AreaRecord> {
        self.areas
    }

    /// Same design and sampling covariances with new direct estimates.
    pub fn with_responses(&self, ys: Vec<DVector<f64>>) -> Result<Dataset> {
        if ys.len() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} response vectors, got {}",
                self.m(),
                ys.len()
            )));
        }
        let mut areas = self.areas.clone();
        for (rec, y) in areas.iter_mut().zip(ys) {
            if y.len() != self.k {
                return Err(Error::DimensionMismatch(format!(
                    "area {}: y has length {}, expected {}",
                    rec.area_id,
                    y.len(),
                    self.k
                )));
            }
            rec.y = y;
        }
        Ok(Dataset { areas, k: self.k, s: self.s, xtx_inv: self.xtx_inv.clone() })
    }

    /// Stacked `km×s` design matrix.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let blocks: Vec<&DMatrix<f64>> = self.areas.iter().map(|a| &a.x).collect();
        if blocks.is_empty() {
            return DMatrix::zeros(0, self.s);
        }
        linalg::vstack(&blocks)
    }

    /// Stacked response of length `km`.
    pub fn stacked_y(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.k * self.m());
        for (i, a) in self.areas.iter().enumerate() {
            out.rows_mut(i * self.k, self.k).copy_from(&a.y);
        }
        out
    }

    /// Scalar sub-model for response component `j`: `y_ij`, row `j` of each
    /// `X_i` restricted to the columns that are nonzero in row `j` for some
    /// area, and `D_i[j, j]`.
    pub fn component(&self, j: usize) -> Result<Dataset> {
        if j >= self.k {
            return Err(Error::ComponentOutOfRange { component: j, k: self.k });
        }
        let active: Vec<usize> = (0..self.s)
            .filter(|&c| self.areas.iter().any(|a| a.x[(j, c)] != 0.0))
            .collect();
        let areas = self
            .areas
            .iter()
            .map(|a| {
                let x = DMatrix::from_fn(1, active.len(), |_, c| a.x[(j, active[c])]);
                AreaRecord::new(
                    a.area_id.clone(),
                    DVector::from_element(1, a.y[j]),
                    x,
                    DMatrix::from_element(1, 1, a.d[(j, j)]),
                )
            })
            .collect();
        validate_dataset(areas)
    }
}

/// Checks that every `D_i` is symmetric positive definite with matching
/// dimensions, then that the stacked design has full column rank. Accepted
/// `D_i` are symmetrized.
pub fn validate_dataset(mut areas: Vec<AreaRecord>) -> Result<Dataset> {
    let m = areas.len();
    if m < 2 {
        return Err(Error::TooFewAreas(m));
    }
    let k = areas[0].y.len();
    let s = areas[0].x.ncols();
    if k == 0 {
        return Err(Error::DimensionMismatch("response dimension k must be positive".into()));
    }
    for a in areas.iter_mut() {
        if a.y.len() != k || a.x.nrows() != k || a.x.ncols() != s || a.d.nrows() != k || a.d.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "area {}: y {}, X {}x{}, D {}x{} (expected k = {k}, s = {s})",
                a.area_id,
                a.y.len(),
                a.x.nrows(),
                a.x.ncols(),
                a.d.nrows(),
                a.d.ncols()
            )));
        }
        if a.y.iter().chain(a.x.iter()).chain(a.d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(format!("area {}: non-finite entry", a.area_id)));
        }
        if linalg::relative_asymmetry(&a.d) > linalg::SYMMETRY_TOL {
            return Err(Error::AsymmetricD { area_id: a.area_id.clone() });
        }
        linalg::symmetrize_mut(&mut a.d);
        if !linalg::is_positive_definite(&a.d)? {
            return Err(Error::NonPositiveDefiniteD { area_id: a.area_id.clone() });
        }
    }

    let xtx_inv = if s == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let blocks: Vec<&DMatrix<f64>> = areas.iter().map(|a| &a.x).collect();
        let stacked = linalg::vstack(&blocks);
        let rank = linalg::numerical_rank(&stacked);
        if rank < s {
            return Err(Error::RankDeficientX { rank, s });
        }
        let xtx = stacked.transpose() * &stacked;
        let inv = linalg::spd_solve(&xtx, &DMatrix::identity(s, s))
            .ok_or(Error::RankDeficientX { rank, s })?;
        linalg::symmetrize(&inv)
    };

    Ok(Dataset { areas, k, s, xtx_inv })
}

/// Regression coefficients and random-effect covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    beta: DVector<f64>,
    psi: DMatrix<f64>,
}

impl ModelParams {
    /// `psi` must be a square PSD matrix, symmetric up to a relative tolerance.
    pub fn new(beta: DVector<f64>, psi: DMatrix<f64>) -> Result<Self> {
        if psi.nrows() != psi.ncols() {
            return Err(Error::DimensionMismatch("Psi must be square".into()));
        }
        if linalg::relative_asymmetry(&psi) > linalg::SYMMETRY_TOL {
            return Err(Error::NotPsd("Psi is not symmetric".into()));
        }
        let psi = linalg::symmetrize(&psi);
        if !linalg::is_psd(&psi, 1e-12)? {
            return Err(Error::NotPsd("Psi has a negative eigenvalue".into()));
        }
        Ok(Self { beta, psi })
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }
}

/// Marginal covariance of `y_i`: `Ψ + D_i`.
pub fn marginal_covariance(params: &ModelParams, record: &AreaRecord) -> Result<DMatrix<f64>> {
    if params.psi.nrows() != record.d.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "Psi is {}x{}, D is {}x{}",
            params.psi.nrows(),
            params.psi.ncols(),
            record.d.nrows(),
            record.d.ncols()
        )));
    }
    Ok(&params.psi + &record.d)
}
