//! Prints simulated MSEM (×100) and PRIAL by group for one design.
//!
//! cargo run --release -p mfh-core --example reproduce_tables -- 0.5 a 30 50000

use std::time::Instant;

use mfh_core::sim::{self, DPattern, Predictor, RunOptions, SimulationDesign};
use mfh_core::PsiVariant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rho: f64 = args.first().map_or(Ok(0.5), |s| s.parse())?;
    let pattern: DPattern = args.get(1).map_or(Ok(DPattern::A), |s| s.parse())?;
    let m: usize = args.get(2).map_or(Ok(30), |s| s.parse())?;
    let reps: usize = args.get(3).map_or(Ok(10_000), |s| s.parse())?;

    let design = SimulationDesign::new(2, m, rho, pattern, reps, 20_190_101)?;
    let start = Instant::now();
    let summary = sim::run(&design, RunOptions::default())?;
    println!("{} replications in {:.2?}", reps, start.elapsed());

    let approx = sim::second_order_by_group(&design)?;
    let eb = summary.msem(Predictor::EblupPr0).per_group;
    let prial = summary.prial();
    let rb = summary.relative_bias(PsiVariant::Pr0);
    for g in 0..sim::GROUPS {
        let e = &eb[g] * 100.0;
        let a = &approx[g] * 100.0;
        println!(
            "G{}  msem [{:5.1} {:5.1} {:5.1}]  approx [{:5.1} {:5.1} {:5.1}]  prial {:5.1} {:5.1}  rb [{:5.1} {:5.1} {:5.1}]",
            g + 1,
            e[(0, 0)],
            e[(0, 1)],
            e[(1, 1)],
            a[(0, 0)],
            a[(0, 1)],
            a[(1, 1)],
            prial.groups[g].vs_direct,
            prial.groups[g].vs_univariate,
            rb[g].get(0, 0).unwrap_or(f64::NAN),
            rb[g].get(0, 1).unwrap_or(f64::NAN),
            rb[g].get(1, 1).unwrap_or(f64::NAN),
        );
    }
    println!(
        "truncation rate {:.4}, median |Psi0 - Psi| {:.4}",
        summary.truncation_rate(PsiVariant::Pr0),
        summary.median_psi0_error()
    );
    Ok(())
}
