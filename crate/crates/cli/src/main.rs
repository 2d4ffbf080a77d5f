//! `circe`: fit, diagnose, test and simulate multi-group CIRCE models.
//!
//! Exit codes: 0 success, 1 usage, I/O or validation error, 2 when an
//! estimator did not converge (reports are still written).

mod commands;
mod ingest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use circe::diagnostics::FactorForm;
use circe::EcmeConfig;

use crate::ingest::DataFormat;

#[derive(Parser, Debug)]
#[command(name = "circe", version, about = "Multi-group CIRCE estimation of model-uncertainty factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a dataset and write a JSON report.
    Fit(FitArgs),
    /// Residuals, Q-Q data, KS test, NEC and prediction intervals for given parameters.
    Diagnose(DiagnoseArgs),
    /// Wald tests between all group pairs and an AIC comparison of the pooled and multi-group models.
    Test(TestArgs),
    /// Draw one dataset from a simulation spec.
    Simulate(SimulateArgs),
    /// Simulate and refit many datasets; writes a report, violin data and NEC curves.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Pooled,
    Multigroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    Gaussian,
    LogGaussian,
}

impl From<FormArg> for FactorForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Gaussian => FactorForm::Gaussian,
            FormArg::LogGaussian => FactorForm::LogGaussian,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct EcmeArgs {
    /// Seed for random starts (and simulation, where relevant).
    #[arg(long, env = "CIRCE_MG_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative log-likelihood change tolerance.
    #[arg(long)]
    pub tol_loglik: Option<f64>,
    /// Maximum absolute parameter change tolerance.
    #[arg(long)]
    pub tol_param: Option<f64>,
    /// Number of random starts in addition to the deterministic one.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Worker threads (default: number of logical CPUs).
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl EcmeArgs {
    pub fn config(&self) -> EcmeConfig {
        let d = EcmeConfig::default();
        EcmeConfig {
            max_iterations: self.max_iter.unwrap_or(d.max_iterations),
            rel_loglik_tol: self.tol_loglik.unwrap_or(d.rel_loglik_tol),
            param_tol: self.tol_param.unwrap_or(d.param_tol),
            n_random_starts: self.starts.unwrap_or(d.n_random_starts),
            seed: self.seed.unwrap_or(d.seed),
            clamp_negative_variances: true,
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset file.
    #[arg(long)]
    pub input: PathBuf,
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "multigroup")]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub form: FormArg,
    /// Dataset file format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: DataFormat,
    #[command(flatten)]
    pub ecme: EcmeArgs,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Fit report or bare `{"m": .., "sigma2": ..}` parameter file.
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub form: FormArg,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: DataFormat,
}

#[derive(Args, Debug)]
pub struct TestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: DataFormat,
    #[command(flatten)]
    pub ecme: EcmeArgs,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Simulation spec (JSON).
    #[arg(long)]
    pub input: PathBuf,
    /// Dataset path; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides the seed stored in the spec.
    #[arg(long, env = "CIRCE_MG_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: DataFormat,
}

#[derive(Args, Debug)]
pub struct ReplicateArgs {
    /// Simulation spec (JSON).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub replications: usize,
    /// Comma-separated group sizes for a sweep; every group is resized.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[command(flatten)]
    pub ecme: EcmeArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(commands::Status::Converged) => ExitCode::SUCCESS,
        Ok(commands::Status::NotConverged) => {
            eprintln!("warning: estimator did not converge; report written anyway");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
