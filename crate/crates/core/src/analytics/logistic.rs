//! Logistic regression by iteratively reweighted least squares.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::stats::normal_two_sided_p;
use super::AnalyticsError;

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    /// Terms in design order, intercept first.
    pub terms: IndexMap<String, TermEstimate>,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl RegressionResult {
    pub fn term(&self, name: &str) -> Option<&TermEstimate> {
        self.terms.get(name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.terms.get(name).map(|t| t.estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 100, tol: 1e-10 }
    }
}

/// `1 / (1 + e^{-x})`, written so that `sigmoid(-x)` mirrors `sigmoid(x)`
/// bit for bit.
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ln σ(x) without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Fits `P(y = 1) = σ(β₀ + Σ βⱼ xⱼ)`. `features` holds one column per
/// named term; the intercept is added here. Columns with no variation are
/// not estimable and are reported with estimate 0, infinite standard error
/// and p = 1.
pub fn fit_logistic(
    features: &DMatrix<f64>,
    names: &[&str],
    labels: &[bool],
    opts: FitOptions,
) -> Result<RegressionResult, AnalyticsError> {
    let n = features.nrows();
    if n == 0 {
        return Err(AnalyticsError::EmptyInput);
    }
    if names.len() != features.ncols() || labels.len() != n {
        return Err(AnalyticsError::DimensionMismatch(format!(
            "{} rows x {} columns, {} names, {} labels",
            n,
            features.ncols(),
            names.len(),
            labels.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFinite);
    }
    let positives = labels.iter().filter(|y| **y).count();
    if positives == 0 || positives == n {
        return Err(AnalyticsError::SingleClass);
    }

    let active: Vec<usize> = (0..features.ncols())
        .filter(|&j| {
            let col = features.column(j);
            col.iter().any(|v| *v != col[0])
        })
        .collect();
    let p = active.len() + 1;
    let mut x = DMatrix::from_element(n, p, 1.0);
    for (k, &j) in active.iter().enumerate() {
        x.set_column(k + 1, &features.column(j));
    }
    let sign: Vec<f64> = labels.iter().map(|y| if *y { 1.0 } else { -1.0 }).collect();

    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    for iter in 1..=opts.max_iter {
        iterations = iter;
        let eta = &x * &beta;
        // y - p, computed as ±σ(∓η) so a label flip mirrors it exactly
        let resid = DVector::from_iterator(n, (0..n).map(|i| sign[i] * sigmoid(-sign[i] * eta[i])));
        let w = DVector::from_iterator(n, eta.iter().map(|e| sigmoid(*e) * sigmoid(-*e)));
        let grad = x.tr_mul(&resid);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        info = x.tr_mul(&xw);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                if iter > 1 && beta.amax() > 10.0 {
                    separated = true;
                    break;
                }
                return Err(AnalyticsError::SingularDesign);
            }
        };
        beta += &step;
        if step.iter().any(|s| !s.is_finite()) {
            return Err(AnalyticsError::SingularDesign);
        }
        let eta = &x * &beta;
        if (0..n).all(|i| sign[i] * eta[i] > 0.0) {
            separated = true;
            break;
        }
        if step.amax() < opts.tol * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
    }
    if !converged && !separated && beta.amax() > 30.0 {
        separated = true;
    }

    let eta = &x * &beta;
    let log_likelihood = (0..n).map(|i| log_sigmoid(sign[i] * eta[i])).sum();
    let cov = info.clone().cholesky().map(|c| c.inverse());
    let mut terms = IndexMap::with_capacity(names.len() + 1);
    let estimate_at = |k: usize| {
        let est = beta[k];
        let se = cov.as_ref().map_or(f64::INFINITY, |c| c[(k, k)].max(0.0).sqrt());
        let z = if se > 0.0 && se.is_finite() { est / se } else { 0.0 };
        TermEstimate { estimate: est, se, z, p: if se.is_finite() { normal_two_sided_p(z) } else { 1.0 } }
    };
    terms.insert(INTERCEPT.to_string(), estimate_at(0));
    for (j, name) in names.iter().enumerate() {
        let est = match active.iter().position(|a| *a == j) {
            Some(k) => estimate_at(k + 1),
            None => TermEstimate { estimate: 0.0, se: f64::INFINITY, z: 0.0, p: 1.0 },
        };
        terms.insert(name.to_string(), est);
    }
    let result = RegressionResult { terms, n, converged: converged && !separated, iterations, log_likelihood };
    if separated {
        return Err(AnalyticsError::SeparationDetected(Box::new(result)));
    }
    Ok(result)
}

/// Standardizes each column to mean 0 and unit sample standard deviation.
/// Constant columns become all zeros.
pub fn zscore_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    if n < 2 {
        m.fill(0.0);
        return;
    }
    for mut col in m.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    }
}
