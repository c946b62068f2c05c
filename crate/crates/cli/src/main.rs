use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfh_core::cli::{execute, Command, RunConfig};
use mfh_core::io::OutputFormat;
use mfh_core::sim::DPattern;
use mfh_core::PsiVariant;

#[derive(Parser)]
#[command(name = "mfh", version, about = "Multivariate Fay-Herriot EBLUP and MSEM estimation")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Estimate beta and Psi, with Wald tests and the implied correlation
    Fit(DataArgs),
    /// Per-area EBLUP with its estimated MSEM
    Predict(DataArgs),
    /// Monte Carlo study on the five-group intercept design
    Simulate(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Psi {
    Pr0,
    Pr1,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    A,
    B,
}

#[derive(Args)]
struct Output {
    #[arg(long, value_enum, default_value = "pr0")]
    psi: Psi,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct DataArgs {
    /// CSV with area_id, y_1..y_k, x_1_1..x_k_s
    #[arg(long)]
    areas: PathBuf,
    /// CSV with area_id, d_1_1..d_k_k
    #[arg(long)]
    cov: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 30)]
    m: usize,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    rho: f64,
    #[arg(long, value_enum, default_value = "a")]
    pattern: Pattern,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads; output does not depend on this
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    output: Output,
}

impl Output {
    fn apply(self, cfg: &mut RunConfig) {
        cfg.psi = match self.psi {
            Psi::Pr0 => PsiVariant::Pr0,
            Psi::Pr1 => PsiVariant::Pr1,
        };
        cfg.format = match self.format {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        };
        cfg.out = self.out;
    }
}

fn config(cli: Cli) -> RunConfig {
    match cli.command {
        Sub::Fit(a) => data_config(Command::Fit, a),
        Sub::Predict(a) => data_config(Command::Predict, a),
        Sub::Simulate(s) => {
            let mut cfg = RunConfig::new(Command::Simulate);
            cfg.k = s.k;
            cfg.m = s.m;
            cfg.rho = s.rho;
            cfg.pattern = match s.pattern {
                Pattern::A => DPattern::A,
                Pattern::B => DPattern::B,
            };
            cfg.reps = s.reps;
            cfg.seed = s.seed;
            cfg.workers = s.workers;
            s.output.apply(&mut cfg);
            cfg
        }
    }
}

fn data_config(command: Command, a: DataArgs) -> RunConfig {
    let mut cfg = RunConfig::new(command);
    cfg.areas = Some(a.areas);
    cfg.cov = Some(a.cov);
    a.output.apply(&mut cfg);
    cfg
}

fn main() -> ExitCode {
    let cfg = config(Cli::parse());
    match execute(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
