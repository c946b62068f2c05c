//! Command implementations behind the `fit`, `predict` and `simulate`
//! subcommands. Argument parsing lives in the binary crate; everything here
//! works on a validated [`RunConfig`] and returns a [`Report`].

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde_json::{json, Map, Value};

use crate::covariance::{self, PsiVariant};
use crate::error::{Error, Result};
use crate::gls::{self, beta_inference};
use crate::io::{self, fmt_num, matrix_json, vector_json, CsvTable, LongTable, OutputFormat, Report};
use crate::model::Dataset;
use crate::msem;
use crate::sim::{self, DPattern, Predictor, RunOptions, SimulationDesign, SimulationSummary, GROUPS};

/// Scale applied to simulated matrices so they read in the conventional ×100 units.
pub const TABLE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Predict,
    Simulate,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub areas: Option<PathBuf>,
    pub cov: Option<PathBuf>,
    pub psi: PsiVariant,
    /// `None` writes to stdout.
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub rho: f64,
    pub pattern: DPattern,
    pub reps: usize,
    /// Worker threads for `simulate`; results do not depend on it.
    pub workers: Option<usize>,
}

impl RunConfig {
    /// PR0 estimates written as CSV. Simulation defaults to k=2, m=30, ρ=0.5
    /// under pattern (a).
    pub fn new(command: Command) -> Self {
        Self {
            command,
            areas: None,
            cov: None,
            psi: PsiVariant::Pr0,
            out: None,
            format: OutputFormat::Csv,
            seed: 1,
            k: 2,
            m: 30,
            rho: 0.5,
            pattern: DPattern::A,
            reps: 1000,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |p: &Option<PathBuf>, flag: &str| match p {
            Some(p) if !p.as_os_str().is_empty() => Ok(()),
            _ => Err(Error::InvalidConfig(format!("{} needs a non-empty {flag}", self.command.as_str()))),
        };
        match self.command {
            Command::Fit | Command::Predict => {
                nonempty(&self.areas, "--areas")?;
                nonempty(&self.cov, "--cov")?;
            }
            Command::Simulate => {
                if self.k == 0 || self.m == 0 || self.reps == 0 {
                    return Err(Error::InvalidConfig("k, m and reps must be positive".into()));
                }
                if !self.rho.is_finite() {
                    return Err(Error::InvalidConfig("rho must be finite".into()));
                }
                if self.workers == Some(0) {
                    return Err(Error::InvalidConfig("workers must be positive".into()));
                }
            }
        }
        if let Some(out) = &self.out {
            if out.as_os_str().is_empty() {
                return Err(Error::InvalidConfig("--out must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn design(&self) -> Result<SimulationDesign> {
        SimulationDesign::new(self.k, self.m, self.rho, self.pattern, self.reps, self.seed)
    }

    fn load(&self) -> Result<Dataset> {
        let areas = self.areas.as_ref().ok_or_else(|| Error::InvalidConfig("missing --areas".into()))?;
        let cov = self.cov.as_ref().ok_or_else(|| Error::InvalidConfig("missing --cov".into()))?;
        io::load_dataset(areas, cov)
    }
}

fn base_meta(command: Command, data: &Dataset, variant: PsiVariant) -> Map<String, Value> {
    let mut meta = Map::new();
    meta.insert("command".into(), json!(command.as_str()));
    meta.insert("m".into(), json!(data.m()));
    meta.insert("k".into(), json!(data.k()));
    meta.insert("s".into(), json!(data.s()));
    meta.insert("psi_variant".into(), json!(variant.as_str()));
    meta
}

/// Regression coefficients, both raw estimates of `Ψ`, the projection used and
/// the implied correlation.
pub fn fit_report(data: &Dataset, variant: PsiVariant) -> Result<Report> {
    let raw0 = covariance::psi_pr0(data)?;
    let raw1 = covariance::psi_pr1(data)?;
    let est = covariance::estimate_psi(data, variant)?;
    let fit = gls::gls_beta(&est.projected, data)?;
    let coefs = beta_inference(&fit)?;
    let corr = est.correlation();

    let mut meta = base_meta(Command::Fit, data, variant);
    meta.insert("coefficients".into(), serde_json::to_value(&coefs)?);
    meta.insert("psi_pr0".into(), matrix_json(&raw0));
    meta.insert("psi_pr1".into(), matrix_json(&raw1));
    meta.insert("psi_plus".into(), matrix_json(&est.projected));
    meta.insert("eigenvalues_raw".into(), vector_json(&est.eigenvalues_raw));
    meta.insert("truncated".into(), json!(est.any_truncated()));
    meta.insert("correlation".into(), matrix_json(&corr));
    if data.k() == 2 {
        meta.insert("rho_hat".into(), json!(corr[(0, 1)]));
    }

    let per_area = data
        .areas()
        .iter()
        .map(|a| {
            let fitted = &a.x * &fit.beta_hat;
            json!({
                "area_id": a.area_id,
                "direct": vector_json(&a.y),
                "fitted": vector_json(&fitted),
                "residual": vector_json(&(&a.y - &fitted)),
            })
        })
        .collect();

    let mut t = LongTable::default();
    for c in &coefs {
        let row = c.index + 1;
        t.cell("coefficients", "estimate", row, 1, Some(c.estimate));
        t.cell("coefficients", "std_error", row, 1, Some(c.std_error));
        t.cell("coefficients", "z", row, 1, Some(c.z));
        t.cell("coefficients", "p_value", row, 1, Some(c.p_value));
    }
    t.matrix("psi_pr0", "", &raw0);
    t.matrix("psi_pr1", "", &raw1);
    t.matrix("psi_plus", variant.as_str(), &est.projected);
    t.matrix("correlation", variant.as_str(), &corr);

    Ok(Report { meta, per_area, per_group: Vec::new(), csv: t.0 })
}

/// `100 (direct − eblup) / direct`, undefined when the direct estimate is zero.
fn shrinkage_pct(direct: f64, eblup: f64) -> Option<f64> {
    (direct != 0.0).then(|| 100.0 * (direct - eblup) / direct)
}

/// One row per area comparing the direct estimate with the EBLUP, plus the
/// estimated MSEM.
pub fn predict_report(data: &Dataset, variant: PsiVariant) -> Result<Report> {
    let k = data.k();
    let eb = gls::eblup_all(data, variant)?;
    let msems = msem::msem_reports_at(&eb.estimate.projected, data, variant)?;

    let mut header = vec!["area_id".to_string()];
    header.extend((1..=k).map(|j| format!("direct_{j}")));
    header.extend((1..=k).map(|j| format!("eblup_{j}")));
    header.extend((1..=k).map(|j| format!("shrinkage_pct_{j}")));
    header.extend((0..k * k).map(|n| format!("msem_{}_{}", n / k + 1, n % k + 1)));
    let mut csv = CsvTable::new(header);

    let mut per_area = Vec::with_capacity(data.m());
    for (p, r) in eb.predictions.iter().zip(&msems) {
        let pct: Vec<Option<f64>> = (0..k).map(|j| shrinkage_pct(p.direct[j], p.theta_hat[j])).collect();
        let mut row = vec![p.area_id.clone()];
        row.extend(p.direct.iter().map(|&v| fmt_num(v)));
        row.extend(p.theta_hat.iter().map(|&v| fmt_num(v)));
        row.extend(pct.iter().map(|v| v.map(fmt_num).unwrap_or_default()));
        row.extend((0..k * k).map(|n| fmt_num(r.estimate[(n / k, n % k)])));
        csv.push(row);

        per_area.push(json!({
            "area_id": p.area_id,
            "direct": vector_json(&p.direct),
            "eblup": vector_json(&p.theta_hat),
            "fitted": vector_json(&p.fitted),
            "shrinkage_pct": pct,
            "shrinkage_matrix": matrix_json(&p.shrinkage),
            "msem": matrix_json(&r.estimate),
            "msem_is_psd": r.estimate_is_psd,
            "g1": matrix_json(&r.g1),
            "g2": matrix_json(&r.g2),
            "g3": matrix_json(&r.g3),
            "g4": matrix_json(&r.g4),
        }));
    }

    let total: DMatrix<f64> = msems.iter().fold(DMatrix::zeros(k, k), |acc, r| acc + &r.estimate);
    let mean = total / data.m() as f64;
    let per_group = vec![json!({
        "group": "all",
        "areas": data.m(),
        "msem_mean": matrix_json(&mean),
        "trace_mean": mean.trace(),
    })];

    let mut meta = base_meta(Command::Predict, data, variant);
    meta.insert("psi_plus".into(), matrix_json(&eb.estimate.projected));
    meta.insert("beta_hat".into(), vector_json(&eb.fit.beta_hat));
    Ok(Report { meta, per_area, per_group, csv })
}

fn scaled(m: &DMatrix<f64>) -> DMatrix<f64> {
    m * TABLE_SCALE
}

fn group_label(g: usize) -> String {
    format!("G{}", g + 1)
}

fn rb_json(rb: &sim::RelativeBiasMatrix) -> Value {
    let k = rb.k;
    Value::Array((0..k).map(|i| json!((0..k).map(|j| rb.get(i, j)).collect::<Vec<_>>())).collect())
}

/// Renders a finished simulation. Matrices are ×100 in the CSV and in the
/// top-level JSON fields; JSON also carries them unscaled under `raw`.
pub fn simulation_report(summary: &SimulationSummary, prial_variant: PsiVariant) -> Result<Report> {
    let design = &summary.design;
    let second = sim::second_order_by_group(design)?;
    let prial = summary.prial_for(prial_variant);
    let tables: Vec<(&str, Vec<DMatrix<f64>>)> = Predictor::ALL
        .iter()
        .map(|&p| (p.as_str(), summary.msem(p).per_group))
        .chain([("second_order", second)])
        .chain([PsiVariant::Pr0, PsiVariant::Pr1].map(|v| {
            let name = match v {
                PsiVariant::Pr0 => "msem_estimate_pr0",
                PsiVariant::Pr1 => "msem_estimate_pr1",
            };
            (name, sim::group_means(design, summary.msem_estimate_mean(v)))
        }))
        .collect();
    let rbs = [PsiVariant::Pr0, PsiVariant::Pr1].map(|v| summary.relative_bias(v));

    let mut t = LongTable::default();
    for (name, groups) in &tables {
        let table = match *name {
            "second_order" | "msem_estimate_pr0" | "msem_estimate_pr1" => name.to_string(),
            other => format!("msem_{other}"),
        };
        for (g, m) in groups.iter().enumerate() {
            t.matrix(&table, &group_label(g), &scaled(m));
        }
    }
    for gp in &prial.groups {
        let label = group_label(gp.group - 1);
        t.cell("prial_vs_direct", &label, 1, 1, Some(gp.vs_direct));
        t.cell("prial_vs_univariate", &label, 1, 1, Some(gp.vs_univariate));
    }
    for (v, rb) in [PsiVariant::Pr0, PsiVariant::Pr1].iter().zip(&rbs) {
        let table = format!("relative_bias_{}", v.as_str());
        for (g, m) in rb.iter().enumerate() {
            for i in 0..m.k {
                for j in 0..m.k {
                    t.cell(&table, &group_label(g), i + 1, j + 1, m.get(i, j));
                }
            }
        }
    }

    let mut per_group = Vec::with_capacity(GROUPS);
    for g in 0..GROUPS {
        let mut entry = Map::new();
        entry.insert("group".into(), json!(group_label(g)));
        entry.insert("d_scale".into(), json!(design.pattern.multipliers()[g]));
        let mut raw = Map::new();
        for (name, groups) in &tables {
            entry.insert(name.to_string(), matrix_json(&scaled(&groups[g])));
            raw.insert(name.to_string(), matrix_json(&groups[g]));
        }
        entry.insert("prial_vs_direct".into(), json!(prial.groups[g].vs_direct));
        entry.insert("prial_vs_univariate".into(), json!(prial.groups[g].vs_univariate));
        entry.insert("relative_bias_pr0".into(), rb_json(&rbs[0][g]));
        entry.insert("relative_bias_pr1".into(), rb_json(&rbs[1][g]));
        entry.insert("raw".into(), Value::Object(raw));
        per_group.push(Value::Object(entry));
    }

    let per_area = (0..design.m)
        .map(|a| {
            let mut entry = Map::new();
            entry.insert("area".into(), json!(a + 1));
            entry.insert("group".into(), json!(group_label(design.group_of(a))));
            for p in Predictor::ALL {
                entry.insert(p.as_str().into(), matrix_json(&scaled(&summary.msem(p).per_area[a])));
            }
            Value::Object(entry)
        })
        .collect();

    let mut meta = Map::new();
    meta.insert("command".into(), json!("simulate"));
    meta.insert("design".into(), serde_json::to_value(design)?);
    meta.insert("psi_true".into(), matrix_json(&design.psi()));
    meta.insert("scale".into(), json!(TABLE_SCALE));
    meta.insert("prial_variant".into(), json!(prial_variant.as_str()));
    for v in [PsiVariant::Pr0, PsiVariant::Pr1] {
        meta.insert(format!("psi_mean_{}", v.as_str()), matrix_json(summary.psi_mean(v)));
        meta.insert(format!("psi_bias_{}", v.as_str()), matrix_json(&summary.psi_bias(v)));
        meta.insert(format!("truncation_rate_{}", v.as_str()), json!(summary.truncation_rate(v)));
    }
    meta.insert("median_psi0_error".into(), json!(summary.median_psi0_error()));

    Ok(Report { meta, per_area, per_group, csv: t.0 })
}

pub fn cmd_fit(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    fit_report(&config.load()?, config.psi)
}

pub fn cmd_predict(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    predict_report(&config.load()?, config.psi)
}

pub fn cmd_simulate(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    let summary = sim::run(&config.design()?, RunOptions { workers: config.workers })?;
    simulation_report(&summary, config.psi)
}

/// Runs the configured command and writes its report.
pub fn execute(config: &RunConfig) -> Result<()> {
    let report = match config.command {
        Command::Fit => cmd_fit(config)?,
        Command::Predict => cmd_predict(config)?,
        Command::Simulate => cmd_simulate(config)?,
    };
    report.write(config.format, config.out.as_deref())
}
