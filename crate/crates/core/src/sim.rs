//! Monte Carlo harness for the intercept-only design `Xᵢ = I_k`.
//!
//! Areas are split into five equal groups with `Dᵢ = c_g I_k`, and
//! `Ψ(ρ) = ρψψᵀ + (1−ρ) diag(ψψᵀ)`. Each replication draws
//! `vᵢ ~ N(0, Ψ)` and `εᵢ ~ N(0, Dᵢ)` from a counter-based ChaCha stream
//! addressed by `(seed, replication, area, role)`, so any replication can be
//! regenerated on its own. Replications are processed in fixed-size chunks and
//! the chunk totals are combined with a pairwise tree whose shape depends only
//! on the replication count, which makes the results bit-identical for any
//! number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{self, PsiVariant};
use crate::error::{Error, Result};
use crate::gls::{self, PsiSource};
use crate::linalg;
use crate::model::{validate_dataset, AreaRecord, Dataset};
use crate::msem;

/// Number of replications folded sequentially before the pairwise merge.
const CHUNK: usize = 128;

/// 32-bit words reserved per `(area, role)` slot inside a replication stream.
const WORDS_PER_SLOT: u128 = 1 << 16;

/// Entries of the true MSEM below this magnitude make a relative bias
/// meaningless and are reported as not applicable.
pub const NEAR_ZERO: f64 = 1e-6;

pub const GROUPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DPattern {
    A,
    B,
}

impl DPattern {
    /// Sampling variance multiplier for groups G₁..G₅.
    pub fn multipliers(&self) -> [f64; GROUPS] {
        match self {
            DPattern::A => [0.7, 0.6, 0.5, 0.4, 0.3],
            DPattern::B => [2.0, 0.6, 0.5, 0.4, 0.2],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DPattern::A => "a",
            DPattern::B => "b",
        }
    }
}

impl std::str::FromStr for DPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(DPattern::A),
            "b" => Ok(DPattern::B),
            other => Err(Error::InvalidConfig(format!("unknown D pattern '{other}'"))),
        }
    }
}

/// Default `ψ` for `k = 2, 3`.
pub fn default_psi_base(k: usize) -> Option<Vec<f64>> {
    match k {
        2 => Some(vec![1.5_f64.sqrt(), 0.5_f64.sqrt()]),
        3 => Some(vec![1.5_f64.sqrt(), 1.0, 0.5_f64.sqrt()]),
        _ => None,
    }
}

/// `ρψψᵀ + (1−ρ) diag(ψψᵀ)`
pub fn structured_psi(psi_base: &[f64], rho: f64) -> DMatrix<f64> {
    let k = psi_base.len();
    DMatrix::from_fn(k, k, |i, j| {
        let outer = psi_base[i] * psi_base[j];
        if i == j {
            outer
        } else {
            rho * outer
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub k: usize,
    pub m: usize,
    pub rho: f64,
    pub pattern: DPattern,
    pub reps: usize,
    pub seed: u64,
    pub psi_base: Vec<f64>,
}

impl SimulationDesign {
    /// Design with the default `ψ` for `k ∈ {2, 3}`.
    pub fn new(k: usize, m: usize, rho: f64, pattern: DPattern, reps: usize, seed: u64) -> Result<Self> {
        let psi_base = default_psi_base(k)
            .ok_or_else(|| Error::InvalidDesign(format!("no default psi for k = {k}; use with_psi_base")))?;
        Self::with_psi_base(psi_base, m, rho, pattern, reps, seed)
    }

    pub fn with_psi_base(
        psi_base: Vec<f64>,
        m: usize,
        rho: f64,
        pattern: DPattern,
        reps: usize,
        seed: u64,
    ) -> Result<Self> {
        let design = Self { k: psi_base.len(), m, rho, pattern, reps, seed, psi_base };
        design.validate()?;
        Ok(design)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.psi_base.len() != self.k {
            return Err(Error::InvalidDesign("psi_base must have length k > 0".into()));
        }
        if self.m < GROUPS || !self.m.is_multiple_of(GROUPS) {
            return Err(Error::InvalidDesign(format!("m = {} must be a positive multiple of {GROUPS}", self.m)));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidDesign(format!("rho = {} outside [-1, 1]", self.rho)));
        }
        if self.reps == 0 {
            return Err(Error::InvalidDesign("reps must be positive".into()));
        }
        if !linalg::is_psd(&self.psi(), 1e-12)? {
            return Err(Error::InvalidDesign(format!("Psi(rho = {}) is not PSD", self.rho)));
        }
        Ok(())
    }

    pub fn psi(&self) -> DMatrix<f64> {
        structured_psi(&self.psi_base, self.rho)
    }

    pub fn group_size(&self) -> usize {
        self.m / GROUPS
    }

    pub fn group_of(&self, area: usize) -> usize {
        area / self.group_size()
    }

    pub fn d_scale(&self, area: usize) -> f64 {
        self.pattern.multipliers()[self.group_of(area)]
    }

    /// Design with all-zero responses; the fixed part of every replication.
    pub fn base_dataset(&self) -> Result<Dataset> {
        let k = self.k;
        let areas = (0..self.m)
            .map(|i| {
                AreaRecord::new(
                    format!("{}", i + 1),
                    DVector::zeros(k),
                    DMatrix::identity(k, k),
                    DMatrix::identity(k, k) * self.d_scale(i),
                )
            })
            .collect();
        validate_dataset(areas)
    }
}

/// A generated dataset and the hidden small-area means `θᵢ = vᵢ` (β = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub dataset: Dataset,
    pub theta: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy)]
enum Role {
    RandomEffect = 0,
    SamplingError = 1,
}

/// Precomputed square roots and the keyed stream for one design.
pub struct Generator {
    base: Dataset,
    psi_sqrt: DMatrix<f64>,
    d_sqrt: Vec<DMatrix<f64>>,
    keyed: ChaCha8Rng,
    k: usize,
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    // SplitMix64 expansion of the 64-bit master seed into a 256-bit key.
    let mut state = seed;
    let mut out = [0u8; 32];
    for chunk in out.chunks_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    out
}

fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = linalg::sym_eigen(a)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

impl Generator {
    pub fn new(design: &SimulationDesign) -> Result<Self> {
        design.validate()?;
        let base = design.base_dataset()?;
        let psi_sqrt = psd_sqrt(&design.psi())?;
        let d_sqrt = base
            .areas()
            .iter()
            .map(|a| linalg::cholesky(&a.d).map(|c| c.l()).ok_or(Error::EigenFailure))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { base, psi_sqrt, d_sqrt, keyed: ChaCha8Rng::from_seed(seed_bytes(design.seed)), k: design.k })
    }

    fn normals(&self, r: usize, area: usize, role: Role) -> DVector<f64> {
        let mut rng = self.keyed.clone();
        rng.set_stream(r as u64);
        rng.set_word_pos((area as u128 * 2 + role as u128) * WORDS_PER_SLOT);
        DVector::from_fn(self.k, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    pub fn replication(&self, r: usize) -> Result<Replication> {
        let m = self.base.m();
        let mut ys = Vec::with_capacity(m);
        let mut theta = Vec::with_capacity(m);
        for i in 0..m {
            let v = &self.psi_sqrt * self.normals(r, i, Role::RandomEffect);
            let e = &self.d_sqrt[i] * self.normals(r, i, Role::SamplingError);
            ys.push(&v + e);
            theta.push(v);
        }
        Ok(Replication { dataset: self.base.with_responses(ys)?, theta })
    }
}

/// Draws replication `r` of a design. Identical `(design, r)` gives identical data.
pub fn generate_replication(design: &SimulationDesign, r: usize) -> Result<Replication> {
    Generator::new(design)?.replication(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Direct,
    EblupPr0,
    EblupPr1,
    Univariate,
}

impl Predictor {
    pub const ALL: [Predictor; 4] = [Predictor::Direct, Predictor::EblupPr0, Predictor::EblupPr1, Predictor::Univariate];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Predictor::Direct => "direct",
            Predictor::EblupPr0 => "eblup_pr0",
            Predictor::EblupPr1 => "eblup_pr1",
            Predictor::Univariate => "univariate",
        }
    }
}

impl From<PsiVariant> for Predictor {
    fn from(v: PsiVariant) -> Self {
        match v {
            PsiVariant::Pr0 => Predictor::EblupPr0,
            PsiVariant::Pr1 => Predictor::EblupPr1,
        }
    }
}

fn variant_slot(v: PsiVariant) -> usize {
    match v {
        PsiVariant::Pr0 => 0,
        PsiVariant::Pr1 => 1,
    }
}

/// Running sums over a block of replications.
#[derive(Debug, Clone)]
struct Accumulator {
    count: usize,
    /// `[predictor][area]` sums of `(θ̂ − θ)(θ̂ − θ)ᵀ`
    sq_err: Vec<Vec<DMatrix<f64>>>,
    /// `[variant][area]` sums of the MSEM estimate
    msem_est: Vec<Vec<DMatrix<f64>>>,
    /// `[variant]` sums of the unprojected estimate of `Ψ`
    psi_raw: Vec<DMatrix<f64>>,
    truncations: [usize; 2],
    /// Frobenius error of raw `Ψ̂₀`, in replication order
    psi0_errors: Vec<f64>,
}

impl Accumulator {
    fn zeros(m: usize, k: usize) -> Self {
        let z = DMatrix::zeros(k, k);
        Self {
            count: 0,
            sq_err: vec![vec![z.clone(); m]; Predictor::ALL.len()],
            msem_est: vec![vec![z.clone(); m]; 2],
            psi_raw: vec![z.clone(); 2],
            truncations: [0; 2],
            psi0_errors: Vec::new(),
        }
    }

    fn merge(&self, other: &Self) -> Self {
        let add_rows = |a: &Vec<Vec<DMatrix<f64>>>, b: &Vec<Vec<DMatrix<f64>>>| {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
                .collect()
        };
        let mut psi0_errors = self.psi0_errors.clone();
        psi0_errors.extend_from_slice(&other.psi0_errors);
        Self {
            count: self.count + other.count,
            sq_err: add_rows(&self.sq_err, &other.sq_err),
            msem_est: add_rows(&self.msem_est, &other.msem_est),
            psi_raw: self.psi_raw.iter().zip(&other.psi_raw).map(|(a, b)| a + b).collect(),
            truncations: [self.truncations[0] + other.truncations[0], self.truncations[1] + other.truncations[1]],
            psi0_errors,
        }
    }

    fn add_replication(&mut self, rep: &Replication, psi_true: &DMatrix<f64>) -> Result<()> {
        let data = &rep.dataset;
        let raw0 = covariance::psi_pr0(data)?;
        let raw1 = linalg::symmetrize(&(&raw0 - covariance::psi0_bias(&raw0, data)?));
        self.psi0_errors.push((&raw0 - psi_true).norm());

        for (variant, raw) in [(PsiVariant::Pr0, &raw0), (PsiVariant::Pr1, &raw1)] {
            let slot = variant_slot(variant);
            let proj = covariance::psd_project(raw)?;
            if proj.any_truncated() {
                self.truncations[slot] += 1;
            }
            self.psi_raw[slot] += raw;

            let (_, preds) = gls::blup_all(&proj.projected, data, PsiSource::from(variant))?;
            let pslot = Predictor::from(variant).slot();
            for (a, p) in preds.iter().enumerate() {
                let e = &p.theta_hat - &rep.theta[a];
                self.sq_err[pslot][a] += &e * e.transpose();
            }
            for (a, est) in msem::msem_estimates_at(&proj.projected, data, variant)?.into_iter().enumerate() {
                self.msem_est[slot][a] += est;
            }
        }

        for (a, p) in gls::univariate_eblup_all(data)?.iter().enumerate() {
            let e = &p.theta_hat - &rep.theta[a];
            self.sq_err[Predictor::Univariate.slot()][a] += &e * e.transpose();
        }
        for (a, rec) in data.areas().iter().enumerate() {
            let e = &rec.y - &rep.theta[a];
            self.sq_err[Predictor::Direct.slot()][a] += &e * e.transpose();
        }
        self.count += 1;
        Ok(())
    }
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global rayon pool, `Some(1)` runs serially.
    pub workers: Option<usize>,
}

/// Averages over all replications of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub design: SimulationDesign,
    /// `[predictor][area]` simulated MSEM
    per_area_msem: Vec<Vec<DMatrix<f64>>>,
    /// `[variant][area]` mean of the MSEM estimate
    msem_estimate_mean: Vec<Vec<DMatrix<f64>>>,
    psi_raw_mean: Vec<DMatrix<f64>>,
    truncation_rate: [f64; 2],
    psi0_errors: Vec<f64>,
}

fn run_chunk(gen: &Generator, design: &SimulationDesign, psi_true: &DMatrix<f64>, start: usize) -> Result<Accumulator> {
    let end = (start + CHUNK).min(design.reps);
    let mut acc = Accumulator::zeros(design.m, design.k);
    for r in start..end {
        acc.add_replication(&gen.replication(r)?, psi_true)?;
    }
    Ok(acc)
}

/// Runs every replication of `design` once, collecting all metrics.
pub fn run(design: &SimulationDesign, opts: RunOptions) -> Result<SimulationSummary> {
    let gen = Generator::new(design)?;
    let psi_true = design.psi();
    let starts: Vec<usize> = (0..design.reps).step_by(CHUNK).collect();

    let chunks: Vec<Accumulator> = match opts.workers {
        Some(1) => starts
            .iter()
            .map(|&s| run_chunk(&gen, design, &psi_true, s))
            .collect::<Result<_>>()?,
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| {
                starts
                    .par_iter()
                    .map(|&s| run_chunk(&gen, design, &psi_true, s))
                    .collect::<Result<_>>()
            })?
        }
        None => starts
            .par_iter()
            .map(|&s| run_chunk(&gen, design, &psi_true, s))
            .collect::<Result<_>>()?,
    };

    let total = linalg::pairwise_sum(&chunks, &|a: &Accumulator, b: &Accumulator| a.merge(b))
        .ok_or_else(|| Error::InvalidDesign("no replications".into()))?;
    let n = total.count as f64;
    let scale = |rows: Vec<Vec<DMatrix<f64>>>| -> Vec<Vec<DMatrix<f64>>> {
        rows.into_iter().map(|row| row.into_iter().map(|x| x / n).collect()).collect()
    };
    Ok(SimulationSummary {
        design: design.clone(),
        per_area_msem: scale(total.sq_err),
        msem_estimate_mean: scale(total.msem_est),
        psi_raw_mean: total.psi_raw.into_iter().map(|x| x / n).collect(),
        truncation_rate: [total.truncations[0] as f64 / n, total.truncations[1] as f64 / n],
        psi0_errors: total.psi0_errors,
    })
}

/// Per-area matrices and their within-group averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MsemTable {
    pub per_area: Vec<DMatrix<f64>>,
    pub per_group: Vec<DMatrix<f64>>,
}

pub fn group_means(design: &SimulationDesign, per_area: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let size = design.group_size();
    per_area
        .chunks(size)
        .map(|c| linalg::pairwise_matrix_sum(c, DMatrix::zeros(design.k, design.k)) / size as f64)
        .collect()
}

/// `100 · (1 − tr(num) / tr(den))`
pub fn prial_value(num: &DMatrix<f64>, den: &DMatrix<f64>) -> f64 {
    100.0 * (1.0 - num.trace() / den.trace())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrial {
    pub group: usize,
    pub vs_direct: f64,
    pub vs_univariate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrialReport {
    pub eblup_variant: PsiVariant,
    pub groups: Vec<GroupPrial>,
    pub msem_eblup: Vec<DMatrix<f64>>,
    pub msem_direct: Vec<DMatrix<f64>>,
    pub msem_univariate: Vec<DMatrix<f64>>,
}

/// Entrywise percentage relative bias for one group; `None` marks entries whose
/// true MSEM is too close to zero to divide by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeBiasMatrix {
    pub k: usize,
    pub entries: Vec<Option<f64>>,
}

impl RelativeBiasMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.k + j]
    }
}

/// `100 · (estimate − truth) / truth` entrywise per area, averaged within groups.
pub fn relative_bias(
    design: &SimulationDesign,
    estimate: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
) -> Vec<RelativeBiasMatrix> {
    let k = design.k;
    let size = design.group_size();
    (0..GROUPS)
        .map(|g| {
            let areas = g * size..(g + 1) * size;
            let entries = (0..k * k)
                .map(|idx| {
                    let (i, j) = (idx / k, idx % k);
                    let mut sum = 0.0;
                    for a in areas.clone() {
                        let t = truth[a][(i, j)];
                        if t.abs() < NEAR_ZERO {
                            return None;
                        }
                        sum += 100.0 * (estimate[a][(i, j)] - t) / t;
                    }
                    Some(sum / size as f64)
                })
                .collect();
            RelativeBiasMatrix { k, entries }
        })
        .collect()
}

impl SimulationSummary {
    pub fn msem(&self, predictor: Predictor) -> MsemTable {
        let per_area = self.per_area_msem[predictor.slot()].clone();
        let per_group = group_means(&self.design, &per_area);
        MsemTable { per_area, per_group }
    }

    pub fn prial_for(&self, variant: PsiVariant) -> PrialReport {
        let eb = self.msem(variant.into()).per_group;
        let direct = self.msem(Predictor::Direct).per_group;
        let uni = self.msem(Predictor::Univariate).per_group;
        let groups = (0..GROUPS)
            .map(|g| GroupPrial {
                group: g + 1,
                vs_direct: prial_value(&eb[g], &direct[g]),
                vs_univariate: prial_value(&eb[g], &uni[g]),
            })
            .collect();
        PrialReport { eblup_variant: variant, groups, msem_eblup: eb, msem_direct: direct, msem_univariate: uni }
    }

    pub fn prial(&self) -> PrialReport {
        self.prial_for(PsiVariant::Pr0)
    }

    /// Mean MSEM estimate per area.
    pub fn msem_estimate_mean(&self, variant: PsiVariant) -> &[DMatrix<f64>] {
        &self.msem_estimate_mean[variant_slot(variant)]
    }

    pub fn relative_bias(&self, variant: PsiVariant) -> Vec<RelativeBiasMatrix> {
        relative_bias(&self.design, self.msem_estimate_mean(variant), &self.msem(variant.into()).per_area)
    }

    /// Mean of the unprojected estimate minus the true `Ψ`.
    pub fn psi_bias(&self, variant: PsiVariant) -> DMatrix<f64> {
        &self.psi_raw_mean[variant_slot(variant)] - self.design.psi()
    }

    pub fn psi_mean(&self, variant: PsiVariant) -> &DMatrix<f64> {
        &self.psi_raw_mean[variant_slot(variant)]
    }

    /// Share of replications in which at least one eigenvalue was clamped.
    pub fn truncation_rate(&self, variant: PsiVariant) -> f64 {
        self.truncation_rate[variant_slot(variant)]
    }

    /// Per-replication `‖Ψ̂₀ − Ψ‖_F` in replication order.
    pub fn psi0_errors(&self) -> &[f64] {
        &self.psi0_errors
    }

    pub fn median_psi0_error(&self) -> f64 {
        let mut v = self.psi0_errors.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Simulated MSEM of one predictor, per area and per group.
pub fn simulate_msem(design: &SimulationDesign, predictor: Predictor) -> Result<MsemTable> {
    Ok(run(design, RunOptions::default())?.msem(predictor))
}

/// PRIAL of the `Ψ̂₀⁺` EBLUP over the direct and univariate predictors, all
/// computed from one shared set of replications.
pub fn prial(design: &SimulationDesign) -> Result<PrialReport> {
    Ok(run(design, RunOptions::default())?.prial())
}

/// Percentage relative bias of the MSEM estimator against the simulated MSEM.
pub fn msem_estimator_bias(design: &SimulationDesign, variant: PsiVariant) -> Result<Vec<RelativeBiasMatrix>> {
    Ok(run(design, RunOptions::default())?.relative_bias(variant))
}

/// Group averages of `G₁+G₂+G₃` at the true `Ψ` (no simulation involved).
pub fn second_order_by_group(design: &SimulationDesign) -> Result<Vec<DMatrix<f64>>> {
    let data = design.base_dataset()?;
    let per_area = msem::msem_second_order_all(&design.psi(), &data)?;
    Ok(group_means(design, &per_area))
}
