//! Special functions and test statistics.

use serde::{Deserialize, Serialize};

use super::AnalyticsError;

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    statrs::function::beta::beta_reg(a, b, x.clamp(0.0, 1.0))
}

/// Upper tail P(T > t) of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let x = df / (df + t * t);
    let tail = 0.5 * incomplete_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    1.0 - student_t_sf(t, df)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    if z.is_infinite() {
        return if z > 0.0 { 0.0 } else { 1.0 };
    }
    // erfc(x) = Q(1/2, x^2)
    let q = if z == 0.0 { 1.0 } else { statrs::function::gamma::gamma_ur(0.5, z * z / 2.0) };
    if z >= 0.0 {
        0.5 * q
    } else {
        1.0 - 0.5 * q
    }
}

/// Two-sided normal p-value for a z statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    (2.0 * normal_sf(z.abs())).min(1.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

impl WelchResult {
    /// One-sided p-value for the alternative mean(a) > mean(b).
    pub fn p_greater(&self) -> f64 {
        student_t_sf(self.t, self.df)
    }

    /// One-sided p-value for the alternative mean(a) < mean(b).
    pub fn p_less(&self) -> f64 {
        student_t_cdf(self.t, self.df)
    }
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult, AnalyticsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalyticsError::DegenerateSample("each sample needs at least two values".into()));
    }
    let (va, vb) = (sample_variance(a), sample_variance(b));
    if va == 0.0 && vb == 0.0 {
        return Err(AnalyticsError::DegenerateSample("both samples have zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = (2.0 * student_t_sf(t.abs(), df)).min(1.0);
    Ok(WelchResult { t, df, p })
}

/// Percentile of `value` against a baseline sample: values below count
/// fully, ties count half.
pub fn percentile_rank(value: f64, baseline: &[f64]) -> f64 {
    assert!(!baseline.is_empty(), "baseline must be non-empty");
    let below = baseline.iter().filter(|x| **x < value).count() as f64;
    let ties = baseline.iter().filter(|x| **x == value).count() as f64;
    100.0 * (below + 0.5 * ties) / baseline.len() as f64
}
