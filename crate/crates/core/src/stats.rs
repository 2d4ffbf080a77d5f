//! Normal, chi-square(1) and Kolmogorov distribution helpers.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;

/// 97.5% standard normal quantile used by the 95% prediction intervals.
pub const Z_975: f64 = 1.96;

/// 95% critical value of the chi-square distribution with one degree of
/// freedom.
pub const CHI2_1_CRIT_5PCT: f64 = 3.841459;

/// Standard normal CDF, `Φ(x) = erfc(-x/√2)/2`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation followed by
/// one Halley refinement step. Returns ±∞ at 0 and 1 and NaN outside
/// `[0, 1]`.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley step. In the upper tail work with the complement to keep
    // relative precision.
    let e = if p > 0.5 {
        (1.0 - p) - 0.5 * erfc(x / SQRT_2)
    } else {
        normal_cdf(x) - p
    };
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(w: f64) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    erfc((0.5 * w).sqrt())
}

/// Upper tail `P[K > x]` of the Kolmogorov distribution.
///
/// Uses the alternating series `2 Σ (-1)^(k-1) exp(-2k²x²)` for `x ≥ 1` and
/// the theta-function form `1 - √(2π)/x Σ exp(-(2k-1)²π²/(8x²))` below,
/// summing until terms are negligible (at most 100 terms).
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        let mut cdf = 0.0;
        for k in 1..=100 {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * PI * PI / (8.0 * x * x)).exp();
            cdf += term;
            if term <= 1e-17 * cdf {
                break;
            }
        }
        (1.0 - (2.0 * PI).sqrt() / x * cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * x * x).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term <= 1e-17 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}
