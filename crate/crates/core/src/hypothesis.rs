//! Wald test for equality of group variances, AIC model comparison and the
//! one-sample Kolmogorov-Smirnov normality test.

use serde::Serialize;

use crate::diagnostics::{block_inverse, FisherBlocks};
use crate::error::{CirceError, Result};
use crate::model::ModelParams;
use crate::stats::{chi2_1_sf, kolmogorov_sf, normal_cdf, normal_quantile, CHI2_1_CRIT_5PCT};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldResult {
    /// `W`, or NaN when the test is undefined.
    pub statistic: f64,
    /// `P[χ²(1) > W]`, or NaN when the test is undefined.
    pub p_value: f64,
    pub group_a: usize,
    pub group_b: usize,
    pub factor: usize,
    pub var_a: f64,
    pub var_b: f64,
    /// Cross-group covariance of the two estimates. The expected information
    /// has no cross-group blocks, so this is always zero.
    pub covariance: f64,
    pub reject_at_5pct: bool,
    /// False when an asymptotic variance is infinite or the denominator is
    /// not positive.
    pub defined: bool,
}

/// Wald statistic `W = (σ̂²_a − σ̂²_b)² / (Var_a + Var_b − 2 Cov)` for factor
/// `j`, with the variances read from the inverse of each group's Fisher
/// block.
pub fn wald_test(f: &FisherBlocks, theta: &ModelParams, a: usize, b: usize, j: usize) -> Result<WaldResult> {
    let q = theta.q();
    if f.var_blocks.len() != q {
        return Err(CirceError::DimensionMismatch("Fisher blocks do not match the parameters".into()));
    }
    for &s in &[a, b] {
        if s >= q {
            return Err(CirceError::IndexOutOfRange { index: s, len: q });
        }
    }
    if j >= theta.p() {
        return Err(CirceError::IndexOutOfRange { index: j, len: theta.p() });
    }
    if a == b {
        return Err(CirceError::InvalidArgument("Wald test needs two distinct groups".into()));
    }

    let var_of = |s: usize| block_inverse(&f.var_blocks[s]).map_or(f64::INFINITY, |inv| inv[(j, j)]);
    let var_a = var_of(a);
    let var_b = var_of(b);
    let covariance = 0.0;
    let denom = var_a + var_b - 2.0 * covariance;
    let diff = theta.sigma2()[a][j] - theta.sigma2()[b][j];

    if !denom.is_finite() || denom <= 0.0 {
        return Ok(WaldResult {
            statistic: f64::NAN,
            p_value: f64::NAN,
            group_a: a,
            group_b: b,
            factor: j,
            var_a,
            var_b,
            covariance,
            reject_at_5pct: false,
            defined: false,
        });
    }
    let statistic = diff * diff / denom;
    Ok(WaldResult {
        statistic,
        p_value: chi2_1_sf(statistic),
        group_a: a,
        group_b: b,
        factor: j,
        var_a,
        var_b,
        covariance,
        reject_at_5pct: statistic > CHI2_1_CRIT_5PCT,
        defined: true,
    })
}

/// Wald tests for every pair `a < b` and every factor.
pub fn wald_all_pairs(f: &FisherBlocks, theta: &ModelParams) -> Result<Vec<WaldResult>> {
    let mut out = Vec::new();
    for a in 0..theta.q() {
        for b in (a + 1)..theta.q() {
            for j in 0..theta.p() {
                out.push(wald_test(f, theta, a, b, j)?);
            }
        }
    }
    Ok(out)
}

/// `AIC = 2 n_θ − 2 l(Y | θ̂)`.
pub fn aic(loglik: f64, n_params: usize) -> f64 {
    2.0 * n_params as f64 - 2.0 * loglik
}

/// Parameter count of the pooled model: `2p`.
pub fn n_params_pooled(p: usize) -> usize {
    2 * p
}

/// Parameter count of the multi-group model: `(q + 1) p`.
pub fn n_params_multigroup(p: usize, q: usize) -> usize {
    (q + 1) * p
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov-Smirnov test against a fixed standard normal.
///
/// The p-value is the asymptotic Kolmogorov tail at `√n · D_n`. No
/// correction is made for parameters estimated from the same data, so on
/// residuals of a fitted model the test is somewhat conservative.
pub fn ks_normality_test(residuals: &[f64]) -> Result<KsResult> {
    let n = residuals.len();
    if n < 3 {
        return Err(CirceError::TooFewSamples { needed: 3, got: n });
    }
    if residuals.iter().any(|v| v.is_nan()) {
        return Err(CirceError::NonFinite("residuals".into()));
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = normal_cdf(x);
            let upper = (i + 1) as f64 / nf - cdf;
            let lower = cdf - i as f64 / nf;
            upper.max(lower)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_sf(nf.sqrt() * statistic),
        n,
    })
}

/// Q-Q plot points: sorted residuals paired with `Φ⁻¹((i − 0.5)/n)`, as
/// `(theoretical, empirical)`.
pub fn qq_plot_data(residuals: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = residuals.len();
    if n < 2 {
        return Err(CirceError::TooFewSamples { needed: 2, got: n });
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| (normal_quantile((i as f64 + 0.5) / n as f64), e))
        .collect())
}
