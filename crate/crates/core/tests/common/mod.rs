//! Independent reference implementations and reusable checks shared by the
//! integration tests and the acceptance runner. Each check returns
//! `Err(description)` instead of panicking so the acceptance runner can
//! report it.
#![allow(dead_code, clippy::needless_range_loop)]

use mfh_core::covariance::{psd_project, psi0_bias, psi_pr0};
use mfh_core::gls::{self, shrinkage_matrix, PsiSource};
use mfh_core::model::{validate_dataset, AreaRecord, Dataset};
use mfh_core::msem;
use mfh_core::sim::{self, DPattern, RunOptions, SimulationDesign};
use mfh_core::PsiVariant;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// `AAᵀ/k + floor·I`
pub fn random_spd(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, k, k);
    let mut m = &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * floor;
    m = (&m + m.transpose()) * 0.5;
    m
}

/// PSD with rank `rank ≤ k`.
pub fn random_psd(rng: &mut ChaCha8Rng, k: usize, rank: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, k, rank);
    let m = &a * a.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random dense design with random sampling covariances.
pub fn random_dataset(rng: &mut ChaCha8Rng, m: usize, k: usize, s: usize) -> Dataset {
    let areas = (0..m)
        .map(|i| {
            AreaRecord::new(
                format!("area{i}"),
                DVector::from_fn(k, |_, _| 2.0 * normal(rng)),
                random_matrix(rng, k, s),
                random_spd(rng, k, 0.2),
            )
        })
        .collect();
    validate_dataset(areas).expect("random design is valid")
}

/// `X_i = blockdiag((1, z_i1), …, (1, z_ik))` with independent components.
pub fn block_dataset(rng: &mut ChaCha8Rng, m: usize, k: usize, diagonal_d: bool) -> Dataset {
    let areas = (0..m)
        .map(|i| {
            let mut x = DMatrix::zeros(k, 2 * k);
            for j in 0..k {
                x[(j, 2 * j)] = 1.0;
                x[(j, 2 * j + 1)] = normal(rng);
            }
            let d = if diagonal_d {
                DMatrix::from_diagonal(&DVector::from_fn(k, |_, _| 0.3 + rng.random::<f64>()))
            } else {
                random_spd(rng, k, 0.3)
            };
            AreaRecord::new(format!("b{i}"), DVector::from_fn(k, |_, _| 1.0 + normal(rng)), x, d)
        })
        .collect();
    validate_dataset(areas).expect("block design is valid")
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Dense stacked oracle
// ---------------------------------------------------------------------------

/// `(XᵀV⁻¹X)⁻¹XᵀV⁻¹y` with `V = I⊗Ψ + blockdiag(Dᵢ)` formed densely and
/// solved by LU.
pub fn dense_gls(psi: &DMatrix<f64>, data: &Dataset) -> DVector<f64> {
    let (m, k, s) = (data.m(), data.k(), data.s());
    let mut v = DMatrix::zeros(m * k, m * k);
    let mut x = DMatrix::zeros(m * k, s);
    let mut y = DVector::zeros(m * k);
    for (i, a) in data.areas().iter().enumerate() {
        v.view_mut((i * k, i * k), (k, k)).copy_from(&(psi + &a.d));
        x.view_mut((i * k, 0), (k, s)).copy_from(&a.x);
        y.rows_mut(i * k, k).copy_from(&a.y);
    }
    let lu = v.lu();
    let vinv_x = lu.solve(&x).expect("V invertible");
    let vinv_y = lu.solve(&y).expect("V invertible");
    let lhs = x.transpose() * vinv_x;
    let rhs = x.transpose() * vinv_y;
    lhs.full_piv_lu().solve(&rhs).expect("information invertible")
}

/// OLS by the normal equations `XᵀXβ = Xᵀy`.
pub fn normal_equations_ols(data: &Dataset) -> DVector<f64> {
    let x = data.stacked_x();
    let y = data.stacked_y();
    (x.transpose() * &x).full_piv_lu().solve(&(x.transpose() * y)).expect("full rank")
}

// ---------------------------------------------------------------------------
// Scalar Fay-Herriot oracle on plain f64 with its own Gauss-Jordan solve
// ---------------------------------------------------------------------------

fn gauss_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn quad(x: &[f64], a: &[Vec<f64>], z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        for j in 0..z.len() {
            acc += x[i] * a[i][j] * z[j];
        }
    }
    acc
}

/// The classical univariate area-level model `yᵢ = xᵢᵀβ + vᵢ + eᵢ`.
#[derive(Debug, Clone)]
pub struct ScalarFh {
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

impl ScalarFh {
    pub fn from_dataset(data: &Dataset) -> Self {
        assert_eq!(data.k(), 1);
        Self {
            y: data.areas().iter().map(|a| a.y[0]).collect(),
            x: data.areas().iter().map(|a| a.x.row(0).iter().copied().collect()).collect(),
            d: data.areas().iter().map(|a| a.d[(0, 0)]).collect(),
        }
    }

    fn m(&self) -> usize {
        self.y.len()
    }

    fn s(&self) -> usize {
        self.x[0].len()
    }

    fn weighted_cross(&self, w: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        let s = self.s();
        let mut out = vec![vec![0.0; s]; s];
        for i in 0..self.m() {
            for p in 0..s {
                for q in 0..s {
                    out[p][q] += w(i) * self.x[i][p] * self.x[i][q];
                }
            }
        }
        out
    }

    /// `(Σ xᵢxᵢᵀ/(ψ+dᵢ))⁻¹`
    pub fn info_inverse(&self, psi: f64) -> Vec<Vec<f64>> {
        gauss_inverse(&self.weighted_cross(|i| 1.0 / (psi + self.d[i])))
    }

    pub fn beta(&self, psi: f64) -> Vec<f64> {
        let inv = self.info_inverse(psi);
        let s = self.s();
        let mut xy = vec![0.0; s];
        for i in 0..self.m() {
            for p in 0..s {
                xy[p] += self.x[i][p] * self.y[i] / (psi + self.d[i]);
            }
        }
        (0..s).map(|p| (0..s).map(|q| inv[p][q] * xy[q]).sum()).collect()
    }

    pub fn blup(&self, psi: f64) -> Vec<f64> {
        let b = self.beta(psi);
        (0..self.m())
            .map(|i| {
                let fit: f64 = self.x[i].iter().zip(&b).map(|(x, b)| x * b).sum();
                let gamma = psi / (psi + self.d[i]);
                fit + gamma * (self.y[i] - fit)
            })
            .collect()
    }

    pub fn g1(&self, a: usize, psi: f64) -> f64 {
        psi * self.d[a] / (psi + self.d[a])
    }

    pub fn g2(&self, a: usize, psi: f64) -> f64 {
        let b = self.d[a] / (psi + self.d[a]);
        b * b * quad(&self.x[a], &self.info_inverse(psi), &self.x[a])
    }

    /// `2 dₐ² (ψ+dₐ)⁻³ m⁻² Σ(ψ+dᵢ)²`
    pub fn g3(&self, a: usize, psi: f64) -> f64 {
        let m = self.m() as f64;
        let va = psi + self.d[a];
        let sum: f64 = self.d.iter().map(|d| (psi + d).powi(2)).sum();
        2.0 * self.d[a].powi(2) / va.powi(3) * sum / (m * m)
    }

    fn ols_hat(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let a = gauss_inverse(&self.weighted_cross(|_| 1.0));
        let h = (0..self.m()).map(|i| quad(&self.x[i], &a, &self.x[i])).collect();
        (a, h)
    }

    /// `m⁻¹Σ(rᵢ² − dᵢ)` with OLS residuals.
    pub fn psi_pr0(&self) -> f64 {
        let (a, _) = self.ols_hat();
        let s = self.s();
        let mut xy = vec![0.0; s];
        for i in 0..self.m() {
            for p in 0..s {
                xy[p] += self.x[i][p] * self.y[i];
            }
        }
        let b: Vec<f64> = (0..s).map(|p| (0..s).map(|q| a[p][q] * xy[q]).sum()).collect();
        let mut acc = 0.0;
        for i in 0..self.m() {
            let r = self.y[i] - self.x[i].iter().zip(&b).map(|(x, b)| x * b).sum::<f64>();
            acc += r * r - self.d[i];
        }
        acc / self.m() as f64
    }

    /// `E[ψ̂₀] − ψ = m⁻¹Σ[xᵢᵀA(Σⱼ xⱼxⱼᵀVⱼ)Axᵢ − 2Vᵢhᵢᵢ]`
    pub fn bias(&self, psi: f64) -> f64 {
        let (a, h) = self.ols_hat();
        let mid = self.weighted_cross(|j| psi + self.d[j]);
        let s = self.s();
        let sandwich: Vec<Vec<f64>> = (0..s)
            .map(|p| {
                (0..s)
                    .map(|q| {
                        let mut acc = 0.0;
                        for u in 0..s {
                            for w in 0..s {
                                acc += a[p][u] * mid[u][w] * a[w][q];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        for i in 0..self.m() {
            acc += quad(&self.x[i], &sandwich, &self.x[i]) - 2.0 * (psi + self.d[i]) * h[i];
        }
        acc / self.m() as f64
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------------------
// Oracle checks
// ---------------------------------------------------------------------------

/// GLS against the dense stacked solve on random instances.
pub fn check_gls_dense(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for n in 0..instances {
        let k: usize = 1 + r.random_range(0..3);
        let s: usize = 1 + r.random_range(0..4);
        let m_min = s.div_ceil(k).max(2);
        let m = r.random_range(m_min..=8);
        let data = random_dataset(&mut r, m, k, s);
        let rank = r.random_range(0..=k);
        let psi = random_psd(&mut r, k, rank);
        let got = gls::gls_beta(&psi, &data).map_err(|e| format!("instance {n}: {e}"))?.beta_hat;
        let want = dense_gls(&psi, &data);
        let e = rel_err_vec(&got, &want);
        ensure(e <= 1e-10, || format!("instance {n} (m={m}, k={k}, s={s}): relative error {e:e}"))?;
    }
    Ok(())
}

/// OLS against the normal equations.
pub fn check_ols_normal_equations(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for n in 0..instances {
        let k: usize = 1 + r.random_range(0..3);
        let s: usize = 1 + r.random_range(0..4);
        let m = r.random_range(s.div_ceil(k).max(2)..=8);
        let data = random_dataset(&mut r, m, k, s);
        let got = mfh_core::ols_beta(&data).map_err(|e| e.to_string())?;
        let e = rel_err_vec(&got, &normal_equations_ols(&data));
        ensure(e <= 1e-10, || format!("instance {n}: OLS relative error {e:e}"))?;
    }
    Ok(())
}

/// The `k = 1` pipeline against [`ScalarFh`].
pub fn check_scalar_pipeline(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for n in 0..instances {
        let s = 1 + r.random_range(0..3);
        let m = r.random_range(s.max(2) + 1..=12);
        let data = random_dataset(&mut r, m, 1, s);
        let oracle = ScalarFh::from_dataset(&data);
        let psi = 0.05 + 2.0 * r.random::<f64>();
        let psi_m = DMatrix::from_element(1, 1, psi);
        let tag = |what: &str, a: usize| format!("instance {n} area {a}: {what}");

        let (_, preds) = gls::blup_all(&psi_m, &data, PsiSource::Known).map_err(|e| e.to_string())?;
        let want = oracle.blup(psi);
        let mut ctx = msem::MsemContext::new(&psi_m, &data).map_err(|e| e.to_string())?;
        for a in 0..m {
            ensure(close(preds[a].theta_hat[0], want[a], 1e-12), || tag("BLUP", a))?;
            let g1 = ctx.g1(a).map_err(|e| e.to_string())?[(0, 0)];
            let g2 = ctx.g2(a).map_err(|e| e.to_string())?[(0, 0)];
            let g3 = ctx.g3(a).map_err(|e| e.to_string())?[(0, 0)];
            let g4 = ctx.g4(a, PsiVariant::Pr0).map_err(|e| e.to_string())?[(0, 0)];
            ensure(close(g1, oracle.g1(a, psi), 1e-12), || tag("g1", a))?;
            ensure(close(g2, oracle.g2(a, psi), 1e-12), || tag("g2", a))?;
            ensure(close(g3, oracle.g3(a, psi), 1e-12), || tag("g3", a))?;
            let shrink = data.areas()[a].d[(0, 0)] / (psi + data.areas()[a].d[(0, 0)]);
            ensure(close(g4, -shrink * shrink * oracle.bias(psi), 1e-12), || tag("g4", a))?;
        }
        let pr0 = psi_pr0(&data).map_err(|e| e.to_string())?[(0, 0)];
        ensure(close(pr0, oracle.psi_pr0(), 1e-12), || format!("instance {n}: psi_pr0"))?;
        let beta = gls::gls_beta(&psi_m, &data).map_err(|e| e.to_string())?.beta_hat;
        for (p, b) in oracle.beta(psi).iter().enumerate() {
            ensure(close(beta[p], *b, 1e-12), || format!("instance {n}: beta[{p}]"))?;
        }
    }
    Ok(())
}

/// Univariate EBLUP of each component equals the scalar oracle run on that
/// component with its clamped moment estimate.
pub fn check_univariate_blocks(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for n in 0..instances {
        let k = 2 + r.random_range(0..2);
        let m = r.random_range(5..=10);
        let data = block_dataset(&mut r, m, k, false);
        let preds = gls::univariate_eblup_all(&data).map_err(|e| e.to_string())?;
        for j in 0..k {
            let sub = data.component(j).map_err(|e| e.to_string())?;
            let oracle = ScalarFh::from_dataset(&sub);
            let psi = oracle.psi_pr0().max(0.0);
            let want = oracle.blup(psi);
            for a in 0..m {
                ensure(close(preds[a].theta_hat[j], want[a], 1e-12), || {
                    format!("instance {n}: component {j} area {a}")
                })?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Property suites
// ---------------------------------------------------------------------------

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn sym_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=4).prop_flat_map(|k| {
        proptest::collection::vec(-5.0f64..5.0, k * k).prop_map(move |v| {
            let a = DMatrix::from_vec(k, k, v);
            (&a + a.transpose()) * 0.5
        })
    })
}

/// PSD matrix of size `k` with random rank, from a seed.
fn psd_from_seed(seed: u64, k: usize) -> DMatrix<f64> {
    let mut r = rng(seed);
    let rank = r.random_range(0..=k);
    random_psd(&mut r, k, rank)
}

fn min_eig(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub fn check_projection_properties(cases: u32) -> Check {
    let mut run = runner(cases);
    run.run(&sym_strategy(), |a| {
        let p = psd_project(&a).unwrap().projected;
        prop_assert!(min_eig(&p) >= -1e-12 * a.norm().max(1.0));
        let pp = psd_project(&p).unwrap().projected;
        prop_assert!(rel_err(&pp, &p) <= 1e-12, "not idempotent: {}", rel_err(&pp, &p));
        let b = &a * &a;
        let pb = psd_project(&b).unwrap().projected;
        prop_assert!(rel_err(&pb, &b) <= 1e-12, "PSD input moved");
        Ok(())
    })
    .map_err(|e| format!("projection: {e}"))
}

pub fn check_shrinkage_eigenvalues(cases: u32) -> Check {
    let mut run = runner(cases);
    run.run(&(1usize..=4, any::<u64>(), 1e-3f64..1e3), |(k, seed, scale)| {
        let psi = psd_from_seed(seed, k) * scale;
        let mut r = rng(seed ^ 0x5eed);
        let d = random_spd(&mut r, k, 0.05);
        // D(Ψ+D)⁻¹ is similar to (I + D^-½ΨD^-½)⁻¹, whose eigenvalues are
        // 1/(1+μ) for the eigenvalues μ ≥ 0 of D^-½ΨD^-½
        let s = shrinkage_matrix(&psi, &d).unwrap();
        let eig = d.clone().symmetric_eigen();
        let inv_root = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        let whitened = &inv_root * &psi * &inv_root;
        let mu = ((&whitened + whitened.transpose()) * 0.5).symmetric_eigenvalues();
        let scale = whitened.norm().max(1.0);
        prop_assert!(mu.min() >= -1e-10 * scale, "negative whitened eigenvalue {}", mu.min());
        let mut want: Vec<f64> = mu.iter().map(|m| 1.0 / (1.0 + m.max(0.0))).collect();
        want.sort_by(f64::total_cmp);
        let want_trace: f64 = want.iter().sum();
        prop_assert!((s.trace() - want_trace).abs() <= 1e-8 * k as f64, "trace {} vs {}", s.trace(), want_trace);
        let mut got: Vec<f64> = gls::shrinkage_eigenvalues(&psi, &d).unwrap().iter().copied().collect();
        got.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!(*g >= -1e-10 && *g <= 1.0 + 1e-10, "eigenvalue {g}");
            prop_assert!((g - w).abs() <= 1e-8, "eigenvalue {g} vs {w}");
        }
        Ok(())
    })
    .map_err(|e| format!("shrinkage: {e}"))
}

/// `Ψ₁ ≼ Ψ₂` implies `G₁(Ψ₁) ≼ G₁(Ψ₂)` for every area.
pub fn check_g1_monotone(cases: u32) -> Check {
    let mut run = runner(cases);
    run.run(&(1usize..=3, any::<u64>()), |(k, seed)| {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, 6, k, 1);
        let psi1 = psd_from_seed(seed.wrapping_add(1), k);
        let psi2 = &psi1 + psd_from_seed(seed.wrapping_add(2), k);
        for a in 0..data.m() {
            let lo = msem::g1(a, &psi1, &data).unwrap();
            let hi = msem::g1(a, &psi2, &data).unwrap();
            prop_assert!(min_eig(&(hi - lo)) >= -1e-10, "area {a}");
        }
        Ok(())
    })
    .map_err(|e| format!("g1 monotonicity: {e}"))
}

fn scaled_dataset(data: &Dataset, c: f64) -> Dataset {
    let areas = data
        .areas()
        .iter()
        .map(|a| AreaRecord::new(a.area_id.clone(), &a.y * c, a.x.clone(), &a.d * (c * c)))
        .collect();
    validate_dataset(areas).unwrap()
}

/// `y → cy`, `D → c²D` scales `Ψ̂` and MSEM by `c²` and the EBLUP by `c`.
pub fn check_scale_equivariance(cases: u32) -> Check {
    let c = 4.0;
    let mut run = runner(cases);
    run.run(&(1usize..=3, any::<u64>()), |(k, seed)| {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, 10, k, 2);
        let big = scaled_dataset(&data, c);
        for v in [PsiVariant::Pr0, PsiVariant::Pr1] {
            let base = gls::eblup_all(&data, v).unwrap();
            let scaled = gls::eblup_all(&big, v).unwrap();
            prop_assert!(rel_err(&scaled.estimate.raw, &(&base.estimate.raw * (c * c))) <= 1e-10);
            for (p, q) in base.predictions.iter().zip(&scaled.predictions) {
                prop_assert!(rel_err_vec(&q.theta_hat, &(&p.theta_hat * c)) <= 1e-10);
            }
            let m0 = msem::msem_estimate_all(&data, v).unwrap();
            let m1 = msem::msem_estimate_all(&big, v).unwrap();
            for (p, q) in m0.iter().zip(&m1) {
                prop_assert!(rel_err(&q.estimate, &(&p.estimate * (c * c))) <= 1e-10);
            }
        }
        Ok(())
    })
    .map_err(|e| format!("scale equivariance: {e}"))
}

/// Reversing area order leaves `Ψ̂₀`, its bias and the GLS fit unchanged and
/// permutes the predictions.
pub fn check_reordering(cases: u32) -> Check {
    let mut run = runner(cases);
    run.run(&(1usize..=3, any::<u64>()), |(k, seed)| {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, 8, k, 2);
        let mut areas = data.areas().to_vec();
        areas.reverse();
        let rev = validate_dataset(areas).unwrap();
        let p0 = psi_pr0(&data).unwrap();
        prop_assert!(rel_err(&psi_pr0(&rev).unwrap(), &p0) <= 1e-12);
        prop_assert!(rel_err(&psi0_bias(&p0, &rev).unwrap(), &psi0_bias(&p0, &data).unwrap()) <= 1e-12);
        let a = gls::eblup_all(&data, PsiVariant::Pr1).unwrap();
        let b = gls::eblup_all(&rev, PsiVariant::Pr1).unwrap();
        prop_assert!(rel_err_vec(&a.fit.beta_hat, &b.fit.beta_hat) <= 1e-10);
        let m = data.m();
        for i in 0..m {
            prop_assert_eq!(&a.predictions[i].area_id, &b.predictions[m - 1 - i].area_id);
            prop_assert!(rel_err_vec(&a.predictions[i].theta_hat, &b.predictions[m - 1 - i].theta_hat) <= 1e-10);
        }
        Ok(())
    })
    .map_err(|e| format!("reordering: {e}"))
}

// ---------------------------------------------------------------------------
// Monte Carlo checks
// ---------------------------------------------------------------------------

/// Draws `y = Xβ + v + e` for a fixed design.
pub fn draw_responses(rng: &mut ChaCha8Rng, data: &Dataset, beta: &DVector<f64>, psi: &DMatrix<f64>) -> Dataset {
    let k = data.k();
    let eig = psi.clone().symmetric_eigen();
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let ys = data
        .areas()
        .iter()
        .map(|a| {
            let z1 = DVector::from_fn(k, |_, _| normal(rng));
            let z2 = DVector::from_fn(k, |_, _| normal(rng));
            let v = &root * z1;
            let e = a.d.clone().cholesky().expect("D positive definite").l() * z2;
            &a.x * beta + v + e
        })
        .collect();
    data.with_responses(ys).unwrap()
}

/// `β̂(Ψ)` at the true `Ψ` is uncorrelated with the OLS residuals: every
/// entry of the sample cross-covariance lies within 4 Monte Carlo standard
/// errors of zero.
pub fn check_beta_residual_independence(reps: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let base = block_dataset(&mut r, 10, 2, false);
    let beta = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3]);
    let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
    let (s, n) = (base.s(), base.m() * base.k());
    let mut sum = DMatrix::zeros(s, n);
    let mut sum_sq = DMatrix::zeros(s, n);
    let x = base.stacked_x();
    for _ in 0..reps {
        let data = draw_responses(&mut r, &base, &beta, &psi);
        let b = gls::gls_beta(&psi, &data).unwrap().beta_hat - &beta;
        let resid = data.stacked_y() - &x * mfh_core::ols_beta(&data).unwrap();
        let prod = &b * resid.transpose();
        sum_sq += prod.component_mul(&prod);
        sum += prod;
    }
    let rf = reps as f64;
    let mean = &sum / rf;
    let var = (&sum_sq / rf - mean.component_mul(&mean)) * (rf / (rf - 1.0));
    for i in 0..s {
        for j in 0..n {
            let se = (var[(i, j)] / rf).sqrt();
            ensure(mean[(i, j)].abs() <= 4.0 * se, || {
                format!("cov(beta[{i}], resid[{j}]) = {:.4e} exceeds 4 se = {:.4e}", mean[(i, j)], 4.0 * se)
            })?;
        }
    }
    Ok(())
}

/// Summary and rendered reports are identical with 1 and 8 workers.
pub fn check_worker_determinism(reps: usize) -> Check {
    let design = SimulationDesign::new(2, 10, 0.5, DPattern::A, reps, 424242).map_err(|e| e.to_string())?;
    let one = sim::run(&design, RunOptions { workers: Some(1) }).map_err(|e| e.to_string())?;
    let eight = sim::run(&design, RunOptions { workers: Some(8) }).map_err(|e| e.to_string())?;
    ensure(one == eight, || "summaries differ between 1 and 8 workers".into())?;
    for fmt in [mfh_core::io::OutputFormat::Csv, mfh_core::io::OutputFormat::Json] {
        let a = mfh_core::cli::simulation_report(&one, PsiVariant::Pr0).and_then(|r| r.render(fmt));
        let b = mfh_core::cli::simulation_report(&eight, PsiVariant::Pr0).and_then(|r| r.render(fmt));
        let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
        ensure(a.as_bytes() == b.as_bytes(), || format!("{} report bytes differ", fmt.as_str()))?;
    }
    Ok(())
}
