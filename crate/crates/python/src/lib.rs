//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mfh_core::cli::{fit_report, predict_report, simulation_report};
use mfh_core::io::OutputFormat;
use mfh_core::sim::{self, DPattern, Predictor, RunOptions, SimulationDesign};
use mfh_core::{covariance, gls, msem, AreaRecord, Error, PsiVariant};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn variant(name: &str) -> PyResult<PsiVariant> {
    name.parse().map_err(to_py)
}

fn format(name: &str) -> PyResult<OutputFormat> {
    name.parse().map_err(to_py)
}

/// A validated set of areas.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: mfh_core::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from per-area ids, responses, design matrices and
    /// sampling covariances.
    #[new]
    fn new(ids: Vec<String>, y: Vec<Vec<f64>>, x: Vec<Vec<Vec<f64>>>, d: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        if ids.len() != y.len() || ids.len() != x.len() || ids.len() != d.len() {
            return Err(PyValueError::new_err("ids, y, x and d must have the same length"));
        }
        let mut areas = Vec::with_capacity(ids.len());
        for (((id, y), x), d) in ids.into_iter().zip(y).zip(x).zip(d) {
            areas.push(AreaRecord::new(id, DVector::from_vec(y), matrix(&x)?, matrix(&d)?));
        }
        Ok(Self { inner: mfh_core::validate_dataset(areas).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(areas: &str, cov: &str) -> PyResult<Self> {
        Ok(Self { inner: mfh_core::io::load_dataset(areas, cov).map_err(to_py)? })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.s()
    }

    #[getter]
    fn area_ids(&self) -> Vec<String> {
        self.inner.areas().iter().map(|a| a.area_id.clone()).collect()
    }

    /// Raw moment estimate of Psi.
    #[pyo3(signature = (variant="pr0"))]
    fn psi_raw(&self, variant: &str) -> PyResult<Vec<Vec<f64>>> {
        let est = covariance::estimate_psi(&self.inner, self::variant(variant)?).map_err(to_py)?;
        Ok(rows(&est.raw))
    }

    /// PSD-projected estimate of Psi.
    #[pyo3(signature = (variant="pr0"))]
    fn psi(&self, variant: &str) -> PyResult<Vec<Vec<f64>>> {
        let est = covariance::estimate_psi(&self.inner, self::variant(variant)?).map_err(to_py)?;
        Ok(rows(&est.projected))
    }

    /// GLS coefficients at a given Psi.
    fn gls_beta(&self, psi: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let fit = gls::gls_beta(&matrix(&psi)?, &self.inner).map_err(to_py)?;
        Ok(fit.beta_hat.iter().copied().collect())
    }

    /// EBLUP of every area.
    #[pyo3(signature = (variant="pr0"))]
    fn eblup(&self, variant: &str) -> PyResult<Vec<Vec<f64>>> {
        let fit = gls::eblup_all(&self.inner, self::variant(variant)?).map_err(to_py)?;
        Ok(fit.predictions.iter().map(|p| p.theta_hat.iter().copied().collect()).collect())
    }

    /// BLUP of every area at a known Psi.
    fn blup(&self, psi: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (_, preds) = gls::blup_all(&matrix(&psi)?, &self.inner, gls::PsiSource::Known).map_err(to_py)?;
        Ok(preds.iter().map(|p| p.theta_hat.iter().copied().collect()).collect())
    }

    /// Estimated MSEM matrix of every area's EBLUP.
    #[pyo3(signature = (variant="pr0"))]
    fn msem_estimate(&self, variant: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let reports = msem::msem_estimate_all(&self.inner, self::variant(variant)?).map_err(to_py)?;
        Ok(reports.iter().map(|r| rows(&r.estimate)).collect())
    }

    /// `G1 + G2 + G3` for every area at a given Psi.
    fn msem_second_order(&self, psi: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let all = msem::msem_second_order_all(&matrix(&psi)?, &self.inner).map_err(to_py)?;
        Ok(all.iter().map(rows).collect())
    }

    #[pyo3(signature = (variant="pr0", format="json"))]
    fn fit_report(&self, variant: &str, format: &str) -> PyResult<String> {
        let report = fit_report(&self.inner, self::variant(variant)?).map_err(to_py)?;
        report.render(self::format(format)?).map_err(to_py)
    }

    #[pyo3(signature = (variant="pr0", format="json"))]
    fn predict_report(&self, variant: &str, format: &str) -> PyResult<String> {
        let report = predict_report(&self.inner, self::variant(variant)?).map_err(to_py)?;
        report.render(self::format(format)?).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(m={}, k={}, s={})", self.inner.m(), self.inner.k(), self.inner.s())
    }
}

/// Runs the Monte Carlo study and returns the report as a string.
#[pyfunction]
#[pyo3(signature = (k=2, m=30, rho=0.5, pattern="a", reps=1000, seed=1, psi="pr0", format="json"))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    k: usize,
    m: usize,
    rho: f64,
    pattern: &str,
    reps: usize,
    seed: u64,
    psi: &str,
    format: &str,
) -> PyResult<String> {
    let pattern: DPattern = pattern.parse().map_err(to_py)?;
    let design = SimulationDesign::new(k, m, rho, pattern, reps, seed).map_err(to_py)?;
    let variant = variant(psi)?;
    let summary = py.detach(|| sim::run(&design, RunOptions::default())).map_err(to_py)?;
    simulation_report(&summary, variant).map_err(to_py)?.render(self::format(format)?).map_err(to_py)
}

/// Group means of `G1 + G2 + G3` at the true Psi of a simulation design.
#[pyfunction]
#[pyo3(signature = (k=2, m=30, rho=0.5, pattern="a"))]
fn second_order_by_group(k: usize, m: usize, rho: f64, pattern: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let pattern: DPattern = pattern.parse().map_err(to_py)?;
    let design = SimulationDesign::new(k, m, rho, pattern, 1, 0).map_err(to_py)?;
    Ok(sim::second_order_by_group(&design).map_err(to_py)?.iter().map(rows).collect())
}

/// Group means of the simulated MSEM of one predictor.
#[pyfunction]
#[pyo3(signature = (predictor, k=2, m=30, rho=0.5, pattern="a", reps=1000, seed=1))]
#[allow(clippy::too_many_arguments)]
fn simulate_msem(
    py: Python<'_>,
    predictor: &str,
    k: usize,
    m: usize,
    rho: f64,
    pattern: &str,
    reps: usize,
    seed: u64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let predictor = Predictor::ALL
        .into_iter()
        .find(|p| p.as_str() == predictor)
        .ok_or_else(|| PyValueError::new_err(format!("unknown predictor '{predictor}'")))?;
    let pattern: DPattern = pattern.parse().map_err(to_py)?;
    let design = SimulationDesign::new(k, m, rho, pattern, reps, seed).map_err(to_py)?;
    let table = py.detach(|| sim::simulate_msem(&design, predictor)).map_err(to_py)?;
    Ok(table.per_group.iter().map(rows).collect())
}

#[pymodule]
fn mfh(module: &Bound<'_, PyModule>) -> PyResult<()> {
    module.add_class::<PyDataset>()?;
    module.add_function(wrap_pyfunction!(simulate, module)?)?;
    module.add_function(wrap_pyfunction!(simulate_msem, module)?)?;
    module.add_function(wrap_pyfunction!(second_order_by_group, module)?)?;
    Ok(())
}
