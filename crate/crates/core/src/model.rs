//! Data model of the linearized inverse problem and the observed-data
//! log-likelihood of the (multi-group) Gaussian factor model.
//!
//! Observation `i` in group `s` follows `Y_i ~ N(H_i m, H_i Σ_s H_iᵀ + R_i)`
//! with `Σ_s = diag(σ²_{s,1}, …, σ²_{s,p})`. The pooled model is the `q = 1`
//! special case.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CirceError, Result};

/// Relative variance floor. The absolute floor of a dataset is this value
/// times the mean of `y²` (or times 1 when `y` is identically zero).
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Unvalidated dataset arrays, as read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub y: Vec<f64>,
    /// Row-major derivative matrix, one row of `p` entries per observation.
    pub h: Vec<Vec<f64>>,
    #[serde(default)]
    pub r: Option<Vec<f64>>,
    #[serde(default)]
    pub groups: Option<Vec<u32>>,
}

/// Validated estimation input: observations, derivative rows, noise
/// variances and a compact group partition.
///
/// Group labels may be arbitrary positive integers in any order; they are
/// mapped onto compact indices `0..q` in increasing label order, and the
/// original labels are kept in [`Dataset::group_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    h: Vec<f64>,
    r: Vec<f64>,
    n: usize,
    p: usize,
    groups: Vec<usize>,
    group_labels: Vec<u32>,
    members: Vec<Vec<usize>>,
    mean_h2: Vec<Vec<f64>>,
    variance_floor: f64,
}

/// Checks raw arrays and builds a [`Dataset`]. Missing `r` defaults to zeros
/// and missing `groups` to a single group.
pub fn validate_dataset(raw: RawDataset) -> Result<Dataset> {
    let n = raw.y.len();
    let r = raw.r.unwrap_or_else(|| vec![0.0; n]);
    let groups = raw.groups.unwrap_or_else(|| vec![1; n]);
    Dataset::new(raw.y, raw.h, r, groups)
}

impl Dataset {
    /// Builds a dataset from row-major `h`, relabelling groups compactly.
    pub fn new(y: Vec<f64>, h: Vec<Vec<f64>>, r: Vec<f64>, groups: Vec<u32>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(CirceError::DimensionMismatch("dataset has no observations".into()));
        }
        if h.len() != n {
            return Err(CirceError::DimensionMismatch(format!(
                "h has {} rows but y has {} entries",
                h.len(),
                n
            )));
        }
        let p = h[0].len();
        if p == 0 {
            return Err(CirceError::DimensionMismatch("h has no columns".into()));
        }
        if let Some((i, row)) = h.iter().enumerate().find(|(_, row)| row.len() != p) {
            return Err(CirceError::DimensionMismatch(format!(
                "row {} of h has {} entries, expected {}",
                i,
                row.len(),
                p
            )));
        }
        let flat: Vec<f64> = h.into_iter().flatten().collect();
        Self::from_flat(y, flat, p, r, groups)
    }

    /// Builds a dataset from a column-major `n × p` matrix.
    pub fn from_matrix(y: Vec<f64>, h: &DMatrix<f64>, r: Vec<f64>, groups: Vec<u32>) -> Result<Self> {
        if h.nrows() != y.len() {
            return Err(CirceError::DimensionMismatch(format!(
                "h has {} rows but y has {} entries",
                h.nrows(),
                y.len()
            )));
        }
        let rows = (0..h.nrows())
            .map(|i| h.row(i).iter().copied().collect())
            .collect();
        Self::new(y, rows, r, groups)
    }

    /// Strict constructor: labels must lie in `1..=q` and every label must
    /// be used.
    pub fn with_group_count(
        y: Vec<f64>,
        h: Vec<Vec<f64>>,
        r: Vec<f64>,
        groups: Vec<u32>,
        q: u32,
    ) -> Result<Self> {
        if q == 0 {
            return Err(CirceError::DimensionMismatch("q must be at least 1".into()));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g == 0 || g > q) {
            return Err(CirceError::DimensionMismatch(format!(
                "group label {bad} outside 1..={q}"
            )));
        }
        for label in 1..=q {
            if !groups.contains(&label) {
                return Err(CirceError::EmptyGroup { label });
            }
        }
        Self::new(y, h, r, groups)
    }

    fn from_flat(y: Vec<f64>, h: Vec<f64>, p: usize, r: Vec<f64>, groups: Vec<u32>) -> Result<Self> {
        let n = y.len();
        if r.len() != n {
            return Err(CirceError::DimensionMismatch(format!(
                "r has {} entries but y has {}",
                r.len(),
                n
            )));
        }
        if groups.len() != n {
            return Err(CirceError::DimensionMismatch(format!(
                "groups has {} entries but y has {}",
                groups.len(),
                n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CirceError::NonFinite("y".into()));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(CirceError::NonFinite("h".into()));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(CirceError::NonFinite("r".into()));
        }
        if let Some((index, &value)) = r.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(CirceError::NegativeNoiseVariance { index, value });
        }

        let rank = numerical_rank(&h, n, p);
        if rank < p {
            return Err(CirceError::RankDeficientH { rank, p });
        }

        // Compact relabelling in increasing label order.
        let mut label_index: BTreeMap<u32, usize> = BTreeMap::new();
        for &g in &groups {
            label_index.entry(g).or_insert(0);
        }
        let group_labels: Vec<u32> = label_index.keys().copied().collect();
        for (s, v) in label_index.values_mut().enumerate() {
            *v = s;
        }
        let q = group_labels.len();
        let compact: Vec<usize> = groups.iter().map(|g| label_index[g]).collect();
        let mut members = vec![Vec::new(); q];
        for (i, &s) in compact.iter().enumerate() {
            members[s].push(i);
        }

        let mut mean_h2 = vec![vec![0.0; p]; q];
        for (s, idx) in members.iter().enumerate() {
            for &i in idx {
                for j in 0..p {
                    let hij = h[i * p + j];
                    mean_h2[s][j] += hij * hij;
                }
            }
            for v in mean_h2[s].iter_mut() {
                *v /= idx.len() as f64;
            }
        }

        let mean_y2 = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let scale = if mean_y2 > 0.0 { mean_y2 } else { 1.0 };

        Ok(Self {
            y,
            h,
            r,
            n,
            p,
            groups: compact,
            group_labels,
            members,
            mean_h2,
            variance_floor: VARIANCE_FLOOR * scale,
        })
    }

    /// The same observations with every group label replaced by 1.
    pub fn pooled(&self) -> Dataset {
        let mut mean_h2 = vec![0.0; self.p];
        for i in 0..self.n {
            for (j, v) in mean_h2.iter_mut().enumerate() {
                *v += self.h(i, j) * self.h(i, j);
            }
        }
        for v in mean_h2.iter_mut() {
            *v /= self.n as f64;
        }
        Dataset {
            y: self.y.clone(),
            h: self.h.clone(),
            r: self.r.clone(),
            n: self.n,
            p: self.p,
            groups: vec![0; self.n],
            group_labels: vec![1],
            members: vec![(0..self.n).collect()],
            mean_h2: vec![mean_h2],
            variance_floor: self.variance_floor,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.group_labels.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// Row `i` of the derivative matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.h[i * self.p..(i + 1) * self.p]
    }

    pub fn h(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.p + j]
    }

    /// The derivative matrix as an `n × p` nalgebra matrix.
    pub fn h_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.h)
    }

    /// Compact (0-based) group index of observation `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.groups[i]
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Original label of each compact group.
    pub fn group_labels(&self) -> &[u32] {
        &self.group_labels
    }

    /// Observation indices belonging to compact group `s`.
    pub fn members(&self, s: usize) -> &[usize] {
        &self.members[s]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Per-group mean of `H_ij²`.
    pub fn group_mean_h2(&self, s: usize, j: usize) -> f64 {
        self.mean_h2[s][j]
    }

    /// Absolute floor applied to every predictive variance.
    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    /// True when at least one noise variance was supplied (non-zero).
    /// Reporting only: nothing in the estimation depends on it.
    pub fn noise_known(&self) -> bool {
        self.r.iter().any(|&v| v > 0.0)
    }

    /// The original label of each observation.
    pub fn labels(&self) -> Vec<u32> {
        self.groups.iter().map(|&s| self.group_labels[s]).collect()
    }

    pub fn to_raw(&self) -> RawDataset {
        RawDataset {
            y: self.y.clone(),
            h: (0..self.n).map(|i| self.row(i).to_vec()).collect(),
            r: Some(self.r.clone()),
            groups: Some(self.labels()),
        }
    }
}

/// Singular values below `σ_max · n · ε` count as zero.
fn numerical_rank(h: &[f64], n: usize, p: usize) -> usize {
    let m = DMatrix::from_row_slice(n, p, h);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = max * n.max(p) as f64 * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ModelParams {
    m: Vec<f64>,
    sigma2: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    m: Vec<f64>,
    sigma2: Vec<Vec<f64>>,
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = CirceError;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        ModelParams::unconstrained(r.m, r.sigma2)
    }
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        ParamsRepr { m: p.m, sigma2: p.sigma2 }
    }
}

impl ModelParams {
    /// Mean vector `m` (length `p`) and per-group variances `sigma2[s][j]`.
    /// All variances must be finite and non-negative.
    pub fn new(m: Vec<f64>, sigma2: Vec<Vec<f64>>) -> Result<Self> {
        let params = Self::unconstrained(m, sigma2)?;
        if !params.is_nonnegative() {
            return Err(CirceError::InvalidArgument("variances must be non-negative".into()));
        }
        Ok(params)
    }

    /// Single-group parameters.
    pub fn pooled(m: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        Self::new(m, vec![sigma2])
    }

    /// Like [`ModelParams::new`] but admits negative variances. Used for raw
    /// (unconstrained) estimates.
    pub fn unconstrained(m: Vec<f64>, sigma2: Vec<Vec<f64>>) -> Result<Self> {
        let p = m.len();
        if p == 0 || sigma2.is_empty() {
            return Err(CirceError::DimensionMismatch("empty parameter vector".into()));
        }
        if sigma2.iter().any(|row| row.len() != p) {
            return Err(CirceError::DimensionMismatch(format!(
                "every sigma2 row must have {p} entries"
            )));
        }
        if m.iter().chain(sigma2.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(CirceError::NonFinite("model parameters".into()));
        }
        Ok(Self { m, sigma2 })
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn sigma2(&self) -> &[Vec<f64>] {
        &self.sigma2
    }

    pub fn sigma2_of(&self, s: usize) -> &[f64] {
        &self.sigma2[s]
    }

    pub fn p(&self) -> usize {
        self.m.len()
    }

    pub fn q(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.sigma2.iter().flatten().all(|&v| v >= 0.0)
    }

    /// Copy with negative variances replaced by zero, plus the mask of
    /// replaced entries.
    pub fn clamped(&self) -> (ModelParams, Vec<Vec<bool>>) {
        let mask: Vec<Vec<bool>> = self
            .sigma2
            .iter()
            .map(|row| row.iter().map(|&v| v < 0.0).collect())
            .collect();
        let sigma2 = self
            .sigma2
            .iter()
            .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
            .collect();
        (ModelParams { m: self.m.clone(), sigma2 }, mask)
    }

    pub(crate) fn from_parts(m: Vec<f64>, sigma2: Vec<Vec<f64>>) -> Self {
        Self { m, sigma2 }
    }

    pub(crate) fn check_against(&self, d: &Dataset) -> Result<()> {
        if self.p() != d.p() || self.q() != d.q() {
            return Err(CirceError::DimensionMismatch(format!(
                "parameters are {}x{} (q x p) but dataset is {}x{}",
                self.q(),
                self.p(),
                d.q(),
                d.p()
            )));
        }
        Ok(())
    }
}

/// Predicted mean and variance of a single observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMoments {
    pub mean: f64,
    pub var: f64,
    /// The raw variance fell below the floor and was raised to it.
    pub degenerate: bool,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_j H_ij² σ²_j + R_i`, without flooring.
#[inline]
pub(crate) fn raw_variance(row: &[f64], sigma2: &[f64], r: f64) -> f64 {
    row.iter().zip(sigma2).map(|(h, s)| h * h * s).sum::<f64>() + r
}

pub fn predictive_moments(d: &Dataset, theta: &ModelParams, i: usize) -> Result<PredictiveMoments> {
    theta.check_against(d)?;
    if i >= d.n() {
        return Err(CirceError::IndexOutOfRange { index: i, len: d.n() });
    }
    let row = d.row(i);
    let raw = raw_variance(row, theta.sigma2_of(d.group_of(i)), d.r()[i]);
    let floor = d.variance_floor();
    Ok(PredictiveMoments {
        mean: dot(row, theta.m()),
        var: raw.max(floor),
        degenerate: raw < floor,
    })
}

/// Observed-data log-likelihood. Fails with
/// [`CirceError::DegenerateVariance`] if any predictive variance is below
/// the floor.
pub fn log_likelihood(d: &Dataset, theta: &ModelParams) -> Result<f64> {
    theta.check_against(d)?;
    let floor = d.variance_floor();
    let mut total = CompensatedSum::default();
    for i in 0..d.n() {
        let row = d.row(i);
        let v = raw_variance(row, theta.sigma2_of(d.group_of(i)), d.r()[i]);
        if v < floor {
            return Err(CirceError::DegenerateVariance { index: i });
        }
        let a = d.y()[i] - dot(row, theta.m());
        total.add(-0.5 * (2.0 * PI * v).ln() - 0.5 * a * a / v);
    }
    Ok(total.value())
}

/// Log-likelihood with every predictive variance raised to the floor
/// instead of failing. This is the objective tracked by the estimator.
pub fn log_likelihood_floored(d: &Dataset, theta: &ModelParams) -> Result<f64> {
    theta.check_against(d)?;
    Ok(loglik_unchecked(d, theta.m(), theta.sigma2()))
}

pub(crate) fn loglik_unchecked(d: &Dataset, m: &[f64], sigma2: &[Vec<f64>]) -> f64 {
    let floor = d.variance_floor();
    let mut total = CompensatedSum::default();
    for i in 0..d.n() {
        let row = d.row(i);
        let v = raw_variance(row, &sigma2[d.group_of(i)], d.r()[i]).max(floor);
        let a = d.y()[i] - dot(row, m);
        total.add(-0.5 * (2.0 * PI * v).ln() - 0.5 * a * a / v);
    }
    total.value()
}

/// Neumaier summation. Keeps the round-off of long likelihood sums well
/// below the ascent tolerance of the estimator.
#[derive(Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}
