//! ECME maximum-likelihood estimation of the shared mean and the per-group
//! variances.
//!
//! One iteration runs two conditional maximizations:
//!
//! * CM1 updates every `σ²_{s,j}` from the conditional moments of the latent
//!   factor deviations given the data, with `A_i = Y_i − H_i m`,
//!   `B_ij = σ²_{s,j} H_ij` and `V_i = H_i Σ_s H_iᵀ + R_i` evaluated at the
//!   current iterate;
//! * CM2 updates `m` by weighted least squares with weights `1/V_i` built
//!   from the freshly updated variances.
//!
//! The pooled estimator is the single-group case.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CirceError, Result};
use crate::model::{dot, loglik_unchecked, raw_variance, Dataset, ModelParams};

/// Two final log-likelihoods closer than this are a tie; the lower start
/// index wins.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcmeConfig {
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood change drops below this...
    pub rel_loglik_tol: f64,
    /// ...and the largest absolute parameter change drops below this.
    pub param_tol: f64,
    /// Randomized starts run in addition to the deterministic one.
    pub n_random_starts: usize,
    pub seed: u64,
    pub clamp_negative_variances: bool,
}

impl Default for EcmeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            rel_loglik_tol: 1e-10,
            param_tol: 1e-9,
            n_random_starts: 8,
            seed: 0,
            clamp_negative_variances: true,
        }
    }
}

impl EcmeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(CirceError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.rel_loglik_tol > 0.0) || !self.rel_loglik_tol.is_finite() {
            return Err(CirceError::InvalidConfig("rel_loglik_tol must be positive".into()));
        }
        if !(self.param_tol > 0.0) || !self.param_tol.is_finite() {
            return Err(CirceError::InvalidConfig("param_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a single ECME iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EcmeStep {
    pub params: ModelParams,
    /// CM1 output before clamping.
    pub raw_sigma2: Vec<Vec<f64>>,
    /// Entries set to zero by the clamp.
    pub clamped: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    /// The estimate `(m̂, σ̂²_{s,j})`; variances are non-negative when
    /// clamping is enabled.
    pub params: ModelParams,
    /// Unconstrained estimate of the variances: the stationary point of the
    /// likelihood reached from `params` without a sign constraint. Negative
    /// entries are variances the clamp replaced by zero.
    pub raw_sigma2: Vec<Vec<f64>>,
    pub clamped: Vec<Vec<bool>>,
    /// Log-likelihood at `params`.
    pub loglik: f64,
    /// Log-likelihood of every iterate of the winning start, starting with
    /// the initial point.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub best_start: usize,
    /// Final log-likelihood per start (`None` when the start failed).
    pub start_logliks: Vec<Option<f64>>,
    /// Groups with a single observation; their variances are weakly
    /// identified.
    pub unidentifiable_groups: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    Deterministic,
    Random,
}

/// Weighted least squares for the mean with weights `1/V_i`.
pub(crate) fn wls_mean(d: &Dataset, sigma2: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = d.p();
    let floor = d.variance_floor();
    let mut normal = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..d.n() {
        let row = d.row(i);
        let w = 1.0 / raw_variance(row, &sigma2[d.group_of(i)], d.r()[i]).max(floor);
        for j in 0..p {
            let wj = w * row[j];
            rhs[j] += wj * d.y()[i];
            for k in 0..=j {
                normal[(j, k)] += wj * row[k];
            }
        }
    }
    solve_symmetric(normal, rhs)
}

fn solve_symmetric(mut normal: DMatrix<f64>, rhs: DVector<f64>) -> Result<Vec<f64>> {
    let p = normal.nrows();
    for j in 0..p {
        for k in (j + 1)..p {
            normal[(j, k)] = normal[(k, j)];
        }
    }
    let chol = normal.cholesky().ok_or(CirceError::SingularNormalEquations)?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(CirceError::SingularNormalEquations);
    }
    Ok(sol.iter().copied().collect())
}

fn ordinary_least_squares(d: &Dataset) -> Result<Vec<f64>> {
    let p = d.p();
    let mut normal = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..d.n() {
        let row = d.row(i);
        for j in 0..p {
            rhs[j] += row[j] * d.y()[i];
            for k in 0..=j {
                normal[(j, k)] += row[j] * row[k];
            }
        }
    }
    solve_symmetric(normal, rhs)
}

/// Starting point. The deterministic start is the OLS mean with per-group
/// variances `MSE_s / (p · mean_{i∈s} H_ij²)`, floored; the random start
/// multiplies each deterministic value by an independent log-uniform factor
/// in `[0.1, 10]`.
pub fn initial_params<R: Rng + ?Sized>(d: &Dataset, mode: StartMode, rng: &mut R) -> Result<ModelParams> {
    let p = d.p();
    let q = d.q();
    let mut m = ordinary_least_squares(d)?;
    let floor = d.variance_floor();
    let mut sigma2 = vec![vec![0.0; p]; q];
    for (s, row) in sigma2.iter_mut().enumerate() {
        let members = d.members(s);
        let mse = members
            .iter()
            .map(|&i| {
                let e = d.y()[i] - dot(d.row(i), &m);
                e * e
            })
            .sum::<f64>()
            / members.len() as f64;
        for (j, v) in row.iter_mut().enumerate() {
            let h2 = d.group_mean_h2(s, j);
            let guess = if h2 > 0.0 { mse / (p as f64 * h2) } else { 0.0 };
            *v = guess.max(floor);
        }
    }
    if mode == StartMode::Random {
        let mut factor = || 10f64.powf(rng.random_range(-1.0..=1.0));
        for v in m.iter_mut() {
            *v *= factor();
        }
        for v in sigma2.iter_mut().flatten() {
            *v *= factor();
        }
    }
    Ok(ModelParams::from_parts(m, sigma2))
}

/// One ECME iteration from `theta`. With `clamp`, negative CM1 outputs (and
/// outputs whose contribution to every predictive variance is below the
/// floor) are set to zero.
pub fn ecme_step_multigroup(d: &Dataset, theta: &ModelParams, clamp: bool) -> Result<EcmeStep> {
    theta.check_against(d)?;
    let mut m = theta.m().to_vec();
    let mut sigma2 = theta.sigma2().to_vec();
    let (raw_sigma2, clamped) = step_in_place(d, &mut m, &mut sigma2, clamp)?;
    Ok(EcmeStep {
        params: ModelParams::from_parts(m, sigma2),
        raw_sigma2,
        clamped,
    })
}

type StepFlags = (Vec<Vec<f64>>, Vec<Vec<bool>>);

fn step_in_place(d: &Dataset, m: &mut Vec<f64>, sigma2: &mut [Vec<f64>], clamp: bool) -> Result<StepFlags> {
    let p = d.p();
    let q = d.q();
    let floor = d.variance_floor();

    // CM1, with everything evaluated at the current iterate.
    let mut acc = vec![vec![0.0; p]; q];
    for i in 0..d.n() {
        let s = d.group_of(i);
        let row = d.row(i);
        let sig = &sigma2[s];
        let a = d.y()[i] - dot(row, m);
        let v = raw_variance(row, sig, d.r()[i]).max(floor);
        for j in 0..p {
            let b = sig[j] * row[j];
            let cond_mean = b * a / v;
            acc[s][j] += cond_mean * cond_mean - b * b / v;
        }
    }
    let mut raw = vec![vec![0.0; p]; q];
    let mut clamped = vec![vec![false; p]; q];
    for s in 0..q {
        let ns = d.members(s).len() as f64;
        for j in 0..p {
            let updated = sigma2[s][j] + acc[s][j] / ns;
            raw[s][j] = updated;
            let h2 = d.group_mean_h2(s, j);
            let negligible = h2 > 0.0 && updated * h2 < floor;
            if clamp && (updated < 0.0 || (negligible && updated != 0.0)) {
                sigma2[s][j] = 0.0;
                clamped[s][j] = true;
            } else {
                sigma2[s][j] = updated;
            }
        }
    }

    // CM2 with the updated variances.
    *m = wls_mean(d, sigma2)?;
    Ok((raw, clamped))
}

struct StartRun {
    m: Vec<f64>,
    sigma2: Vec<Vec<f64>>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    ever_clamped: Vec<Vec<bool>>,
}

fn start_rng(seed: u64, start: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_add(start as u64))
}

fn run_start(d: &Dataset, cfg: &EcmeConfig, start: usize) -> Result<StartRun> {
    let mode = if start == 0 { StartMode::Deterministic } else { StartMode::Random };
    let init = initial_params(d, mode, &mut start_rng(cfg.seed, start))?;
    let mut m = init.m().to_vec();
    let mut sigma2 = init.sigma2().to_vec();
    let mut ever_clamped = vec![vec![false; d.p()]; d.q()];

    let mut ll = loglik_unchecked(d, &m, &sigma2);
    let mut trace = Vec::with_capacity(64);
    trace.push(ll);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        let prev_m = m.clone();
        let prev_sigma2 = sigma2.clone();
        let (_, clamped) = step_in_place(d, &mut m, &mut sigma2, cfg.clamp_negative_variances)?;
        iterations += 1;
        for (acc, now) in ever_clamped.iter_mut().flatten().zip(clamped.iter().flatten()) {
            *acc |= *now;
        }

        let next = loglik_unchecked(d, &m, &sigma2);
        if !next.is_finite() {
            return Err(CirceError::NonFinite("log-likelihood during ECME".into()));
        }
        trace.push(next);
        let rel = (next - ll).abs() / ll.abs().max(1.0);
        let dparam = m
            .iter()
            .zip(&prev_m)
            .chain(sigma2.iter().flatten().zip(prev_sigma2.iter().flatten()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ll = next;
        if rel < cfg.rel_loglik_tol && dparam < cfg.param_tol {
            converged = true;
            break;
        }
    }

    Ok(StartRun {
        m,
        sigma2,
        trace,
        iterations,
        converged,
        ever_clamped,
    })
}

/// Log-likelihood requiring every predictive variance to exceed the floor.
fn strict_loglik(d: &Dataset, m: &[f64], sigma2: &[Vec<f64>]) -> Option<f64> {
    let floor = d.variance_floor();
    let ok = (0..d.n()).all(|i| raw_variance(d.row(i), &sigma2[d.group_of(i)], d.r()[i]) > floor);
    ok.then(|| loglik_unchecked(d, m, sigma2))
}

/// Fisher scoring on the variances, with the mean profiled out by weighted
/// least squares, starting from `(m, sigma2)` and without a sign
/// constraint. Step halving keeps every predictive variance positive and the
/// log-likelihood from decreasing. Returns the input variances when no
/// improving step exists.
fn refine_unconstrained(d: &Dataset, m: &[f64], sigma2: &[Vec<f64>], cfg: &EcmeConfig) -> Vec<Vec<f64>> {
    let p = d.p();
    let q = d.q();
    let mut sigma2 = sigma2.to_vec();
    let Some(mut ll) = strict_loglik(d, m, &sigma2) else {
        return sigma2;
    };
    let mut m = m.to_vec();

    for _ in 0..200 {
        let mut delta = vec![vec![0.0; p]; q];
        for (s, ds) in delta.iter_mut().enumerate() {
            let mut info = DMatrix::<f64>::zeros(p, p);
            let mut score = DVector::<f64>::zeros(p);
            for &i in d.members(s) {
                let row = d.row(i);
                let v = raw_variance(row, &sigma2[s], d.r()[i]);
                let a = d.y()[i] - dot(row, &m);
                for j in 0..p {
                    let hj2 = row[j] * row[j];
                    score[j] += 0.5 * hj2 * (a * a / (v * v) - 1.0 / v);
                    for k in 0..=j {
                        info[(j, k)] += 0.5 * hj2 * row[k] * row[k] / (v * v);
                    }
                }
            }
            match solve_symmetric(info, score) {
                Ok(sol) => *ds = sol,
                Err(_) => return sigma2,
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<Vec<f64>> = sigma2
                .iter()
                .zip(&delta)
                .map(|(row, dr)| row.iter().zip(dr).map(|(v, dv)| v + step * dv).collect())
                .collect();
            if let Ok(m_trial) = wls_mean(d, &trial) {
                if let Some(ll_trial) = strict_loglik(d, &m_trial, &trial) {
                    if ll_trial >= ll - 1e-12 * ll.abs().max(1.0) {
                        accepted = Some((trial, m_trial, ll_trial));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((trial, m_trial, ll_trial)) = accepted else {
            break;
        };
        let change = trial
            .iter()
            .flatten()
            .zip(sigma2.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        sigma2 = trial;
        m = m_trial;
        ll = ll_trial;
        if change < cfg.param_tol * 1e-3 {
            break;
        }
    }
    sigma2
}

/// Multi-group ECME from one deterministic and `n_random_starts` random
/// starts; returns the start with the highest final log-likelihood.
///
/// Start `k` draws from a ChaCha20 stream seeded with `seed + k`. Starts run
/// in parallel; the result does not depend on scheduling.
pub fn fit_multigroup(d: &Dataset, cfg: &EcmeConfig) -> Result<FitResult> {
    cfg.validate()?;
    let n_starts = cfg.n_random_starts + 1;
    let runs: Vec<Result<StartRun>> = (0..n_starts)
        .into_par_iter()
        .map(|start| run_start(d, cfg, start))
        .collect();

    let start_logliks: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.as_ref().ok().and_then(|run| run.trace.last().copied()))
        .collect();

    let mut best: Option<usize> = None;
    for (k, ll) in start_logliks.iter().enumerate() {
        let Some(ll) = ll else { continue };
        match best {
            None => best = Some(k),
            Some(b) => {
                let lb = start_logliks[b].unwrap_or(f64::NEG_INFINITY);
                if *ll > lb + TIE_TOLERANCE {
                    best = Some(k);
                }
            }
        }
    }
    let Some(best_start) = best else {
        // Every start failed: surface the first error.
        return Err(runs.into_iter().find_map(|r| r.err()).expect("at least one start"));
    };
    let run = runs
        .into_iter()
        .nth(best_start)
        .expect("index in range")
        .expect("winning start succeeded");

    let raw_sigma2 = refine_unconstrained(d, &run.m, &run.sigma2, cfg);
    let mut m = run.m;
    let mut sigma2 = run.sigma2;
    let mut clamped = vec![vec![false; d.p()]; d.q()];
    if cfg.clamp_negative_variances {
        let mut changed = false;
        for s in 0..d.q() {
            for j in 0..d.p() {
                if raw_sigma2[s][j] < 0.0 && sigma2[s][j] != 0.0 {
                    // The likelihood keeps increasing past zero: the
                    // estimate belongs on the boundary.
                    sigma2[s][j] = 0.0;
                    changed = true;
                }
                clamped[s][j] = sigma2[s][j] == 0.0 && (run.ever_clamped[s][j] || raw_sigma2[s][j] < 0.0);
            }
        }
        if changed {
            m = wls_mean(d, &sigma2)?;
        }
    }
    let loglik = loglik_unchecked(d, &m, &sigma2);

    Ok(FitResult {
        params: ModelParams::from_parts(m, sigma2),
        raw_sigma2,
        clamped,
        loglik,
        loglik_trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
        best_start,
        start_logliks,
        unidentifiable_groups: d.group_sizes().iter().map(|&n| n == 1).collect(),
    })
}

/// Pooled (single-variance) ECME: [`fit_multigroup`] with all group labels
/// ignored.
pub fn fit_regular(d: &Dataset, cfg: &EcmeConfig) -> Result<FitResult> {
    fit_multigroup(&d.pooled(), cfg)
}

/// Closed-form pooled MLE for one factor without experimental noise: the
/// sample mean and the biased (1/n) sample variance of `y_i / h_i`.
pub fn closed_form_mle(d: &Dataset) -> Result<ModelParams> {
    if d.p() != 1 {
        return Err(CirceError::PreconditionViolated(format!(
            "closed form needs p = 1, got p = {}",
            d.p()
        )));
    }
    if d.r().iter().any(|&r| r != 0.0) {
        return Err(CirceError::PreconditionViolated("closed form needs r = 0".into()));
    }
    if (0..d.n()).any(|i| d.h(i, 0) == 0.0) {
        return Err(CirceError::PreconditionViolated("closed form needs h_i != 0".into()));
    }
    let ratios: Vec<f64> = (0..d.n()).map(|i| d.y()[i] / d.h(i, 0)).collect();
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    ModelParams::pooled(vec![mean], vec![var])
}
