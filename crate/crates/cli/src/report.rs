//! Report layouts and writers. JSON reports carry `schema_version`; floats
//! in CSV files are written with 17 significant digits. Infinite or
//! undefined numbers appear as `null` in JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use circe::diagnostics::{prediction_interval, FactorForm};
use circe::estimator::EcmeConfig;
use circe::hypothesis::KsResult;
use circe::synthetic::{format_float, ReplicationReport};
use circe::ModelParams;
use serde::Serialize;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Serialize)]
pub struct Interval {
    pub group: u32,
    pub factor: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Intervals for every group and factor, labelled with the original group
/// labels and 1-based factors.
pub fn intervals(theta: &ModelParams, labels: &[u32], form: FactorForm) -> Result<Vec<Interval>> {
    let mut out = Vec::with_capacity(theta.q() * theta.p());
    for (s, &group) in labels.iter().enumerate() {
        for j in 0..theta.p() {
            let (lower, upper) = prediction_interval(theta, s, j, form)?;
            out.push(Interval {
                group,
                factor: j + 1,
                lower,
                upper,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct BothIntervals {
    pub gaussian: Vec<Interval>,
    pub log_gaussian: Vec<Interval>,
}

#[derive(Debug, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub best_start: usize,
    pub start_logliks: Vec<Option<f64>>,
    /// Last change of the log-likelihood trace of the winning start.
    pub final_loglik_change: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub schema_version: &'static str,
    pub command: &'static str,
    pub model: &'static str,
    pub form: FactorForm,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub group_labels: Vec<u32>,
    pub group_sizes: Vec<usize>,
    pub noise_known: bool,
    pub params: ModelParams,
    pub raw_sigma2: Vec<Vec<f64>>,
    pub clamped: Vec<Vec<bool>>,
    pub unidentifiable_groups: Vec<bool>,
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
    pub nec: Option<Vec<Vec<f64>>>,
    pub var_of_mean: Option<Vec<f64>>,
    pub var_of_sigma2: Option<Vec<Vec<f64>>>,
    pub diagnostics_error: Option<String>,
    pub prediction_intervals: BothIntervals,
    pub convergence: Convergence,
    pub config: EcmeConfig,
}

#[derive(Debug, Serialize)]
pub struct KsReport {
    pub schema_version: &'static str,
    #[serde(flatten)]
    pub ks: KsResult,
    pub reject_at_5pct: bool,
    /// All residuals are (numerically) identical, so the test only says the
    /// fit is degenerate.
    pub degenerate: bool,
}

#[derive(Debug, Serialize)]
pub struct DiagnosticsFile {
    pub schema_version: &'static str,
    pub form: FactorForm,
    pub group_labels: Vec<u32>,
    pub nec: Vec<Vec<f64>>,
    pub var_of_mean: Vec<f64>,
    pub var_of_sigma2: Vec<Vec<f64>>,
    pub prediction_intervals: Vec<Interval>,
}

#[derive(Debug, Serialize)]
pub struct WaldEntry {
    pub group_a: u32,
    pub group_b: u32,
    pub factor: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub covariance: f64,
    pub reject_at_5pct: bool,
    pub defined: bool,
}

#[derive(Debug, Serialize)]
pub struct AicEntry {
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize)]
pub struct AicComparison {
    pub pooled: AicEntry,
    pub multigroup: AicEntry,
}

#[derive(Debug, Serialize)]
pub struct TestReport {
    pub schema_version: &'static str,
    pub command: &'static str,
    pub group_labels: Vec<u32>,
    pub wald: Vec<WaldEntry>,
    pub aic: AicComparison,
    pub preferred_model: &'static str,
    pub preference: String,
}

#[derive(Debug, Serialize)]
pub struct ReplicateFile<'a> {
    pub schema_version: &'static str,
    #[serde(flatten)]
    pub report: &'a ReplicationReport,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Writes to `path`, or to standard output when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn residuals_csv(residuals: &[f64], groups: &[u32]) -> String {
    let mut out = String::from("index,group,residual\n");
    for (i, (e, g)) in residuals.iter().zip(groups).enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, g, format_float(*e)));
    }
    out
}

pub fn qq_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("theoretical,empirical\n");
    for (t, e) in points {
        out.push_str(&format!("{},{}\n", format_float(*t), format_float(*e)));
    }
    out
}
