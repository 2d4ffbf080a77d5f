//! Fisher information, asymptotic variances, NEC identifiability
//! indicators, standardized residuals and prediction intervals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CirceError, Result};
use crate::model::{dot, raw_variance, Dataset, ModelParams};
use crate::stats::{normal_quantile, Z_975};

/// Expected information of the mean and of each group's variances. The
/// mean/variance cross blocks and the cross-group blocks are identically
/// zero and not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherBlocks {
    /// `I(m_j, m_k) = Σ_i H_ij H_ik / V_i`.
    pub mean_block: DMatrix<f64>,
    /// `I(σ²_{s,j}, σ²_{s,k}) = ½ Σ_{i∈s} H_ij² H_ik² / V_i²`, one per group.
    pub var_blocks: Vec<DMatrix<f64>>,
}

pub fn fisher_information(d: &Dataset, theta: &ModelParams) -> Result<FisherBlocks> {
    theta.check_against(d)?;
    let p = d.p();
    let floor = d.variance_floor();
    let mut mean_block = DMatrix::<f64>::zeros(p, p);
    let mut var_blocks = vec![DMatrix::<f64>::zeros(p, p); d.q()];
    for i in 0..d.n() {
        let s = d.group_of(i);
        let row = d.row(i);
        let v = raw_variance(row, theta.sigma2_of(s), d.r()[i]);
        if v < floor {
            return Err(CirceError::DegenerateVariance { index: i });
        }
        let v2 = v * v;
        for j in 0..p {
            for k in 0..=j {
                mean_block[(j, k)] += row[j] * row[k] / v;
                var_blocks[s][(j, k)] += 0.5 * row[j] * row[j] * row[k] * row[k] / v2;
            }
        }
    }
    symmetrize(&mut mean_block);
    var_blocks.iter_mut().for_each(symmetrize);
    Ok(FisherBlocks { mean_block, var_blocks })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for j in 0..m.nrows() {
        for k in (j + 1)..m.ncols() {
            m[(j, k)] = m[(k, j)];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticVariances {
    /// `1 / I(m_j, m_j)`; infinite when the information is zero.
    pub var_of_mean: Vec<f64>,
    /// `1 / I(σ²_{s,j}, σ²_{s,j})`.
    pub var_of_sigma2: Vec<Vec<f64>>,
    /// Full inverse of the mean block, when it is invertible.
    pub mean_cov: Option<DMatrix<f64>>,
    /// Full inverse of each group's variance block, when invertible.
    pub sigma2_cov: Vec<Option<DMatrix<f64>>>,
}

/// Reciprocal diagonal approximations (cross terms neglected), plus the
/// exact block inverses.
pub fn asymptotic_variances(f: &FisherBlocks) -> AsymptoticVariances {
    let recip_diag = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows())
            .map(|j| {
                let v = m[(j, j)];
                if v > 0.0 {
                    1.0 / v
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    };
    AsymptoticVariances {
        var_of_mean: recip_diag(&f.mean_block),
        var_of_sigma2: f.var_blocks.iter().map(recip_diag).collect(),
        mean_cov: block_inverse(&f.mean_block),
        sigma2_cov: f.var_blocks.iter().map(block_inverse).collect(),
    }
}

pub(crate) fn block_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// `NEC_{s,j} = sqrt(Var[m̂_j]) / σ̂_{s,j}` with `Var[m̂_j] ≈ 1/I(m_j, m_j)`.
/// Infinite when `σ̂_{s,j} = 0` or the information about `m_j` is zero.
pub fn nec(f: &FisherBlocks, theta: &ModelParams) -> Vec<Vec<f64>> {
    let var_of_mean = asymptotic_variances(f).var_of_mean;
    nec_from_moments(&var_of_mean, theta.sigma2())
}

pub(crate) fn nec_from_moments(var_of_mean: &[f64], sigma2: &[Vec<f64>]) -> Vec<Vec<f64>> {
    sigma2
        .iter()
        .map(|row| {
            row.iter()
                .zip(var_of_mean)
                .map(|(&s2, &vm)| if s2 > 0.0 { vm.sqrt() / s2.sqrt() } else { f64::INFINITY })
                .collect()
        })
        .collect()
}

/// `e_i = (Y_i − H_i m̂) / sqrt(H_i Σ̂_s H_iᵀ + R_i)`.
pub fn standardized_residuals(d: &Dataset, theta: &ModelParams) -> Result<Vec<f64>> {
    theta.check_against(d)?;
    let floor = d.variance_floor();
    (0..d.n())
        .map(|i| {
            let row = d.row(i);
            let v = raw_variance(row, theta.sigma2_of(d.group_of(i)), d.r()[i]);
            if v < floor {
                return Err(CirceError::DegenerateVariance { index: i });
            }
            Ok((d.y()[i] - dot(row, theta.m())) / v.sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorForm {
    /// The factor itself is Gaussian.
    Gaussian,
    /// The estimates describe `log Λ`; intervals are exponentiated.
    LogGaussian,
}

/// 95% prediction interval `m̂_j ± 1.96 σ̂_{s,j}` (exponentiated for the
/// log-Gaussian form).
pub fn prediction_interval(theta: &ModelParams, s: usize, j: usize, form: FactorForm) -> Result<(f64, f64)> {
    interval_with_quantile(theta, s, j, form, Z_975)
}

/// Prediction interval at an arbitrary two-sided level in `(0, 1)`. The
/// 0.95 level uses the conventional 1.96 exactly.
pub fn prediction_interval_at_level(
    theta: &ModelParams,
    s: usize,
    j: usize,
    form: FactorForm,
    level: f64,
) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CirceError::InvalidArgument(format!("level {level} not in (0, 1)")));
    }
    let z = if level == 0.95 { Z_975 } else { normal_quantile(0.5 + 0.5 * level) };
    interval_with_quantile(theta, s, j, form, z)
}

fn interval_with_quantile(theta: &ModelParams, s: usize, j: usize, form: FactorForm, z: f64) -> Result<(f64, f64)> {
    if s >= theta.q() {
        return Err(CirceError::IndexOutOfRange { index: s, len: theta.q() });
    }
    if j >= theta.p() {
        return Err(CirceError::IndexOutOfRange { index: j, len: theta.p() });
    }
    let s2 = theta.sigma2()[s][j];
    if s2 < 0.0 {
        return Err(CirceError::InvalidArgument("negative variance".into()));
    }
    let m = theta.m()[j];
    let half = z * s2.sqrt();
    Ok(match form {
        FactorForm::Gaussian => (m - half, m + half),
        FactorForm::LogGaussian => ((m - half).exp(), (m + half).exp()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupInterval {
    pub group: usize,
    pub factor: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub nec: Vec<Vec<f64>>,
    pub var_of_mean: Vec<f64>,
    pub var_of_sigma2: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub form: FactorForm,
    pub prediction_intervals: Vec<GroupInterval>,
}

/// Full diagnostic suite at `theta`.
pub fn diagnose(d: &Dataset, theta: &ModelParams, form: FactorForm) -> Result<DiagnosticsReport> {
    let f = fisher_information(d, theta)?;
    let av = asymptotic_variances(&f);
    let nec = nec_from_moments(&av.var_of_mean, theta.sigma2());
    let residuals = standardized_residuals(d, theta)?;
    let mut prediction_intervals = Vec::with_capacity(theta.q() * theta.p());
    for s in 0..theta.q() {
        for j in 0..theta.p() {
            let (lower, upper) = prediction_interval(theta, s, j, form)?;
            prediction_intervals.push(GroupInterval { group: s, factor: j, lower, upper });
        }
    }
    Ok(DiagnosticsReport {
        nec,
        var_of_mean: av.var_of_mean,
        var_of_sigma2: av.var_of_sigma2,
        residuals,
        form,
        prediction_intervals,
    })
}
