//! Synthetic data from the generative model `Y_i = H_i λ_i + ε_i`,
//! `λ_i ~ N(m, Σ_s)`, `ε_i ~ N(0, R_i)`, and a replication harness that
//! refits many simulated datasets.
//!
//! # Random streams
//!
//! A dataset is drawn from a ChaCha20 generator seeded with
//! `SimulationSpec::seed` through `SeedableRng::seed_from_u64`. Observations
//! are generated group by group, in order; for each observation the
//! generator yields the `p` entries of `H_i` (for random laws), then `p`
//! standard normals for `λ_i`, then one standard normal for `ε_i`. Normals
//! come from `rand_distr::StandardNormal` (ziggurat). Replication `k` uses
//! data seed `seed ^ splitmix64(k)` and estimator seed
//! `cfg.seed ^ splitmix64(k)`. This layout is stable within a major
//! version.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::nec_from_moments;
use crate::error::{CirceError, Result};
use crate::estimator::{fit_multigroup, EcmeConfig};
use crate::model::{dot, Dataset};

/// Sampling law of the derivative rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HLaw {
    /// Explicit rows, one per observation in group order.
    Fixed { rows: Vec<Vec<f64>> },
    /// Column `j` drawn from `U(a_j, b_j)` for every observation.
    Uniform { bounds: Vec<[f64; 2]> },
    /// Column `j` of group `s` drawn from `U(a_{s,j}, b_{s,j})`; expresses
    /// regime rules where the group is determined by the range of `H`.
    GroupUniform { bounds: Vec<Vec<[f64; 2]>> },
}

/// Law of the experimental noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseLaw {
    Zero,
    Constant { variance: f64 },
    /// `R_i = c · Σ_j H_ij`, which needs a positive row sum.
    Proportional { coefficient: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub p: usize,
    pub q: usize,
    pub group_sizes: Vec<usize>,
    pub true_m: Vec<f64>,
    pub true_sigma2: Vec<Vec<f64>>,
    pub h_law: HLaw,
    pub noise_law: NoiseLaw,
    pub seed: u64,
}

impl SimulationSpec {
    /// One factor, two regimes: `σ² = 0.04` for `H ∈ [0.5, 10)` (40 points)
    /// and `σ² = 0.12` for `H ∈ [10, 30)` (60 points), `m = 1`,
    /// `R_i = 0.01 H_i`.
    pub fn two_regime_demo(seed: u64) -> Self {
        Self {
            p: 1,
            q: 2,
            group_sizes: vec![40, 60],
            true_m: vec![1.0],
            true_sigma2: vec![vec![0.04], vec![0.12]],
            h_law: HLaw::GroupUniform {
                bounds: vec![vec![[0.5, 10.0]], vec![[10.0, 30.0]]],
            },
            noise_law: NoiseLaw::Proportional { coefficient: 0.01 },
            seed,
        }
    }

    /// Three factors, three equally sized groups, `m = (1, 2, 4)`, group
    /// variances 0.9, 0.3 and 0.6 on every factor, columns of `H` drawn from
    /// `U(60,90)`, `U(40,70)`, `U(20,50)`, no noise.
    pub fn three_group_demo(n_tilde: usize, seed: u64) -> Self {
        Self {
            p: 3,
            q: 3,
            group_sizes: vec![n_tilde; 3],
            true_m: vec![1.0, 2.0, 4.0],
            true_sigma2: vec![vec![0.9; 3], vec![0.3; 3], vec![0.6; 3]],
            h_law: HLaw::Uniform {
                bounds: vec![[60.0, 90.0], [40.0, 70.0], [20.0, 50.0]],
            },
            noise_law: NoiseLaw::Zero,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CirceError::InvalidSpec(msg));
        if self.p == 0 || self.q == 0 {
            return bad("p and q must be at least 1".into());
        }
        if self.group_sizes.len() != self.q {
            return bad(format!("{} group sizes for q = {}", self.group_sizes.len(), self.q));
        }
        if self.group_sizes.iter().any(|&n| n == 0) {
            return bad("every group size must be at least 1".into());
        }
        if self.true_m.len() != self.p || self.true_m.iter().any(|v| !v.is_finite()) {
            return bad(format!("true_m must hold {} finite values", self.p));
        }
        if self.true_sigma2.len() != self.q
            || self.true_sigma2.iter().any(|row| row.len() != self.p)
        {
            return bad(format!("true_sigma2 must be {} x {}", self.q, self.p));
        }
        if self.true_sigma2.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return bad("true_sigma2 entries must be finite and non-negative".into());
        }
        let check_bounds = |b: &[f64; 2]| b[0].is_finite() && b[1].is_finite() && b[0] < b[1];
        match &self.h_law {
            HLaw::Fixed { rows } => {
                if rows.len() != self.n() || rows.iter().any(|r| r.len() != self.p) {
                    return bad(format!("fixed h_law needs {} rows of {} entries", self.n(), self.p));
                }
            }
            HLaw::Uniform { bounds } => {
                if bounds.len() != self.p || !bounds.iter().all(check_bounds) {
                    return bad(format!("uniform h_law needs {} bounds with a < b", self.p));
                }
            }
            HLaw::GroupUniform { bounds } => {
                if bounds.len() != self.q
                    || bounds.iter().any(|g| g.len() != self.p || !g.iter().all(check_bounds))
                {
                    return bad(format!("group_uniform h_law needs {} x {} bounds with a < b", self.q, self.p));
                }
            }
        }
        match self.noise_law {
            NoiseLaw::Zero => {}
            NoiseLaw::Constant { variance } if variance >= 0.0 && variance.is_finite() => {}
            NoiseLaw::Proportional { coefficient } if coefficient >= 0.0 && coefficient.is_finite() => {}
            _ => return bad("noise parameters must be finite and non-negative".into()),
        }
        Ok(())
    }

    /// The same spec with every group resized to `n_tilde`.
    pub fn with_group_size(&self, n_tilde: usize) -> Result<Self> {
        if matches!(self.h_law, HLaw::Fixed { .. }) {
            return Err(CirceError::InvalidSpec("a fixed h_law cannot be resized".into()));
        }
        Ok(Self {
            group_sizes: vec![n_tilde; self.q],
            ..self.clone()
        })
    }
}

/// Draws one dataset; deterministic given `spec.seed`.
pub fn simulate(spec: &SimulationSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n = spec.n();
    let p = spec.p;
    let mut y = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut i = 0;
    for (s, &size) in spec.group_sizes.iter().enumerate() {
        for _ in 0..size {
            let row: Vec<f64> = match &spec.h_law {
                HLaw::Fixed { rows } => rows[i].clone(),
                HLaw::Uniform { bounds } => bounds.iter().map(|b| rng.random_range(b[0]..b[1])).collect(),
                HLaw::GroupUniform { bounds } => {
                    bounds[s].iter().map(|b| rng.random_range(b[0]..b[1])).collect()
                }
            };
            let lambda: Vec<f64> = (0..p)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.true_m[j] + spec.true_sigma2[s][j].sqrt() * z
                })
                .collect();
            let noise_var = match spec.noise_law {
                NoiseLaw::Zero => 0.0,
                NoiseLaw::Constant { variance } => variance,
                NoiseLaw::Proportional { coefficient } => {
                    let total: f64 = row.iter().sum();
                    if !(total > 0.0) {
                        return Err(CirceError::InvalidSpec(format!(
                            "proportional noise needs a positive H row sum (row {i})"
                        )));
                    }
                    coefficient * total
                }
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            y.push(dot(&row, &lambda) + noise_var.sqrt() * z);
            h.push(row);
            r.push(noise_var);
            groups.push(s as u32 + 1);
            i += 1;
        }
    }
    Dataset::new(y, h, r, groups)
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `index` derived from a base seed.
pub fn replication_seed(base: u64, index: usize) -> u64 {
    base ^ splitmix64(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationEstimate {
    pub replication: usize,
    pub m: Vec<f64>,
    /// Reported (clamped) variances.
    pub sigma2: Vec<Vec<f64>>,
    /// Unconstrained variances, possibly negative.
    pub raw_sigma2: Vec<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Smallest consecutive change in the log-likelihood trace (infinite
    /// when the trace has a single entry).
    pub min_trace_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub estimate: Option<ReplicationEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    /// `"m"` or `"sigma2"`.
    pub parameter: String,
    /// 1-based group, absent for the shared mean.
    pub group: Option<usize>,
    /// 1-based factor.
    pub factor: usize,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationBlock {
    pub n_tilde: usize,
    pub group_sizes: Vec<usize>,
    pub outcomes: Vec<ReplicationOutcome>,
    /// Summaries of `m̂` and of the raw `σ̂²` over successful replications.
    pub summary: Vec<ParameterSummary>,
    /// `NEC_{s,j} = sd(m̂_j) / mean(σ̂_{s,j})` across replications, where
    /// `σ̂_{s,j}` is the square root of the clamped variance.
    pub nec: Vec<Vec<f64>>,
    /// Fraction of raw variance estimates below zero.
    pub negative_fraction: f64,
}

impl ReplicationBlock {
    pub fn estimates(&self) -> impl Iterator<Item = &ReplicationEstimate> {
        self.outcomes.iter().filter_map(|o| o.estimate.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub spec: SimulationSpec,
    pub n_replications: usize,
    pub blocks: Vec<ReplicationBlock>,
}

/// Simulates and refits `n_replications` datasets at the spec's group
/// sizes. Estimation failures are recorded per replication.
pub fn replicate(spec: &SimulationSpec, n_replications: usize, cfg: &EcmeConfig) -> Result<ReplicationReport> {
    spec.validate()?;
    let block = run_block(spec, n_replications, cfg)?;
    Ok(ReplicationReport {
        spec: spec.clone(),
        n_replications,
        blocks: vec![block],
    })
}

/// [`replicate`] at every group size in `sizes` (all groups resized).
pub fn replicate_sweep(
    spec: &SimulationSpec,
    sizes: &[usize],
    n_replications: usize,
    cfg: &EcmeConfig,
) -> Result<ReplicationReport> {
    spec.validate()?;
    if sizes.is_empty() {
        return Err(CirceError::InvalidArgument("no group sizes given".into()));
    }
    let blocks = sizes
        .iter()
        .map(|&n_tilde| {
            let sized = spec.with_group_size(n_tilde)?;
            sized.validate()?;
            run_block(&sized, n_replications, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationReport {
        spec: spec.clone(),
        n_replications,
        blocks,
    })
}

fn run_block(spec: &SimulationSpec, n_replications: usize, cfg: &EcmeConfig) -> Result<ReplicationBlock> {
    if n_replications == 0 {
        return Err(CirceError::InvalidArgument("n_replications must be at least 1".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<ReplicationOutcome> = (0..n_replications)
        .into_par_iter()
        .map(|k| {
            let data_spec = SimulationSpec {
                seed: replication_seed(spec.seed, k),
                ..spec.clone()
            };
            let fit_cfg = EcmeConfig {
                seed: replication_seed(cfg.seed, k),
                ..cfg.clone()
            };
            let result = simulate(&data_spec).and_then(|d| fit_multigroup(&d, &fit_cfg));
            match result {
                Ok(fit) => ReplicationOutcome {
                    replication: k,
                    estimate: Some(ReplicationEstimate {
                        replication: k,
                        m: fit.params.m().to_vec(),
                        sigma2: fit.params.sigma2().to_vec(),
                        raw_sigma2: fit.raw_sigma2,
                        loglik: fit.loglik,
                        converged: fit.converged,
                        iterations: fit.iterations,
                        min_trace_increment: fit
                            .loglik_trace
                            .windows(2)
                            .map(|w| w[1] - w[0])
                            .fold(f64::INFINITY, f64::min),
                    }),
                    error: None,
                },
                Err(e) => ReplicationOutcome {
                    replication: k,
                    estimate: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let estimates: Vec<&ReplicationEstimate> = outcomes.iter().filter_map(|o| o.estimate.as_ref()).collect();
    let (p, q) = (spec.p, spec.q);
    let mut summary = Vec::with_capacity(p + p * q);
    for j in 0..p {
        let values: Vec<f64> = estimates.iter().map(|e| e.m[j]).collect();
        summary.push(summarize("m", None, j + 1, &values));
    }
    for s in 0..q {
        for j in 0..p {
            let values: Vec<f64> = estimates.iter().map(|e| e.raw_sigma2[s][j]).collect();
            summary.push(summarize("sigma2", Some(s + 1), j + 1, &values));
        }
    }

    let var_of_mean: Vec<f64> = (0..p)
        .map(|j| {
            let values: Vec<f64> = estimates.iter().map(|e| e.m[j]).collect();
            sample_variance(&values)
        })
        .collect();
    let mean_sd_squared: Vec<Vec<f64>> = (0..q)
        .map(|s| {
            (0..p)
                .map(|j| mean(&estimates.iter().map(|e| e.sigma2[s][j].sqrt()).collect::<Vec<_>>()).powi(2))
                .collect()
        })
        .collect();
    let nec = nec_from_moments(&var_of_mean, &mean_sd_squared);

    let raw: Vec<f64> = estimates.iter().flat_map(|e| e.raw_sigma2.iter().flatten().copied()).collect();
    let negative_fraction = if raw.is_empty() {
        0.0
    } else {
        raw.iter().filter(|&&v| v < 0.0).count() as f64 / raw.len() as f64
    };

    Ok(ReplicationBlock {
        n_tilde: spec.group_sizes.iter().copied().max().unwrap_or(0),
        group_sizes: spec.group_sizes.clone(),
        outcomes,
        summary,
        nec,
        negative_fraction,
    })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let mu = mean(values);
    values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (values.len() - 1) as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = prob * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(parameter: &str, group: Option<usize>, factor: usize, values: &[f64]) -> ParameterSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    ParameterSummary {
        parameter: parameter.to_string(),
        group,
        factor,
        count: values.len(),
        mean: mean(values),
        sd: if values.len() < 2 { 0.0 } else { sample_variance(values).sqrt() },
        q05: quantile_sorted(&sorted, 0.05),
        q25: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        q95: quantile_sorted(&sorted, 0.95),
    }
}

/// One long-format plot row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolinRow {
    pub parameter: &'static str,
    /// 1-based group; `None` for the shared mean.
    pub group: Option<usize>,
    /// 1-based factor.
    pub factor: usize,
    pub n_tilde: usize,
    pub replication: usize,
    pub value: f64,
}

pub const VIOLIN_HEADER: &str = "parameter,group,factor,n_tilde,replication,value";

/// Long-format rows of every `m̂_j` and raw `σ̂²_{s,j}`, ordered by block,
/// replication, then parameter (means first).
pub fn violin_export(report: &ReplicationReport) -> Vec<ViolinRow> {
    let mut rows = Vec::new();
    for block in &report.blocks {
        for est in block.estimates() {
            for (j, &v) in est.m.iter().enumerate() {
                rows.push(ViolinRow {
                    parameter: "m",
                    group: None,
                    factor: j + 1,
                    n_tilde: block.n_tilde,
                    replication: est.replication,
                    value: v,
                });
            }
            for (s, row) in est.raw_sigma2.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    rows.push(ViolinRow {
                        parameter: "sigma2",
                        group: Some(s + 1),
                        factor: j + 1,
                        n_tilde: block.n_tilde,
                        replication: est.replication,
                        value: v,
                    });
                }
            }
        }
    }
    rows
}

/// Float formatting used by every CSV writer: 17 significant digits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV text of [`violin_export`] with header [`VIOLIN_HEADER`]; the group
/// field is empty for mean rows.
pub fn violin_csv(report: &ReplicationReport) -> String {
    let mut out = String::from(VIOLIN_HEADER);
    out.push('\n');
    for row in violin_export(report) {
        let group = row.group.map(|g| g.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.parameter,
            group,
            row.factor,
            row.n_tilde,
            row.replication,
            format_float(row.value)
        ));
    }
    out
}

/// Wide CSV of the NEC table: one row per block, one `nec_s{s}_j{j}`
/// column per group and factor.
pub fn nec_curve_csv(report: &ReplicationReport) -> String {
    let (p, q) = (report.spec.p, report.spec.q);
    let mut out = String::from("n_tilde");
    for s in 1..=q {
        for j in 1..=p {
            out.push_str(&format!(",nec_s{s}_j{j}"));
        }
    }
    out.push('\n');
    for block in &report.blocks {
        out.push_str(&block.n_tilde.to_string());
        for v in block.nec.iter().flatten() {
            out.push(',');
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    out
}
