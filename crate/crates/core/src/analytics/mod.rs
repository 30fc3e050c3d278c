//! Strategy attribution and performance statistics.
//!
//! The mixed-effects models of the original analysis are approximated in
//! two stages: a fixed-effects logistic fit per run, then the mean of the
//! per-run coefficients with its across-run standard error.

mod choice;
mod logistic;
mod stats;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use choice::{
    build_choice_dataset, pool_estimates, read_choice_csv, read_snapshot_csv, run_model1, run_model2,
    write_choice_csv, write_snapshot_csv, ChoiceDataset, ChoiceDatum, ElementValue, Model1Result, PooledEstimate,
    RunData, SnapshotRow, EMPOWERMENT, TEMPERATURE, TEMP_X_EMPOWERMENT, TEMP_X_UNCERTAINTY, TRIAL, UNCERTAINTY,
};
pub use logistic::{fit_logistic, zscore_columns, FitOptions, RegressionResult, TermEstimate, INTERCEPT};
pub use stats::{
    incomplete_beta, ln_gamma, normal_sf, normal_two_sided_p, percentile_rank, student_t_cdf, student_t_sf, welch_t,
    WelchResult,
};

use crate::engine::{BehaviorCategory, TrialRecord};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no data")]
    EmptyInput,
    #[error("only one outcome class present")]
    SingleClass,
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("perfect separation: coefficients diverge")]
    SeparationDetected(Box<RegressionResult>),
    #[error("model 2 needs at least two distinct temperatures")]
    InsufficientTemperatureVariation,
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("run {run_id}: {source}")]
    InRun { run_id: String, source: Box<AnalyticsError> },
    #[error("invalid baseline: {0}")]
    InvalidBaseline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Discoveries per human player under a fixed trial cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanBaseline {
    pub discoveries: Vec<u32>,
    pub trials_cap: u32,
}

impl HumanBaseline {
    pub fn new(discoveries: Vec<u32>, trials_cap: u32) -> Result<Self, AnalyticsError> {
        let b = HumanBaseline { discoveries, trials_cap };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.discoveries.is_empty() {
            return Err(AnalyticsError::InvalidBaseline("no players".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AnalyticsError> {
        let b: HumanBaseline = serde_json::from_slice(&std::fs::read(path)?)?;
        b.validate()?;
        Ok(b)
    }

    pub fn values(&self) -> Vec<f64> {
        self.discoveries.iter().map(|d| *d as f64).collect()
    }

    pub fn percentile(&self, value: f64) -> f64 {
        percentile_rank(value, &self.values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub group: String,
    pub sessions: usize,
    pub trials: usize,
    pub proportions: BTreeMap<BehaviorCategory, f64>,
}

/// Share of each behavior category per group. Groups without trials are
/// left out.
pub fn behavior_summary<'a, I, S>(groups: I) -> Vec<BehaviorRow>
where
    I: IntoIterator<Item = (String, Vec<S>)>,
    S: AsRef<[TrialRecord]> + 'a,
{
    let mut rows = Vec::new();
    for (group, sessions) in groups {
        let mut counts: BTreeMap<BehaviorCategory, usize> = BehaviorCategory::ALL.iter().map(|c| (*c, 0)).collect();
        let mut trials = 0;
        for s in &sessions {
            for r in s.as_ref() {
                *counts.entry(r.category).or_default() += 1;
                trials += 1;
            }
        }
        if trials == 0 {
            continue;
        }
        let proportions = counts.into_iter().map(|(c, k)| (c, k as f64 / trials as f64)).collect();
        rows.push(BehaviorRow { group, sessions: sessions.len(), trials, proportions });
    }
    rows
}

pub fn write_behavior_csv<W: Write>(rows: &[BehaviorRow], out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["group".to_string(), "sessions".into(), "trials".into()];
    header.extend(BehaviorCategory::ALL.iter().map(|c| c.as_str().to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.group.clone(), r.sessions.to_string(), r.trials.to_string()];
        rec.extend(BehaviorCategory::ALL.iter().map(|c| r.proportions[c].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the plot-ready estimate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub group: String,
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

pub fn regression_rows(group: &str, result: &RegressionResult) -> Vec<EstimateRow> {
    result
        .terms
        .iter()
        .map(|(term, t)| EstimateRow {
            group: group.to_string(),
            term: term.clone(),
            estimate: t.estimate,
            se: t.se,
            z: t.z,
            p: t.p,
        })
        .collect()
}

/// Per-run rows grouped by run id, followed by the pooled rows under
/// group `pooled`.
pub fn model1_rows(result: &Model1Result) -> Vec<EstimateRow> {
    let mut rows: Vec<EstimateRow> = result.per_run.iter().flat_map(|(run, r)| regression_rows(run, r)).collect();
    rows.extend(result.pooled.iter().map(|(term, t)| EstimateRow {
        group: "pooled".into(),
        term: term.clone(),
        estimate: t.estimate,
        se: t.se,
        z: t.z,
        p: t.p,
    }));
    rows
}

pub fn write_estimates_csv<W: Write>(rows: &[EstimateRow], out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON array of `{term, estimate, se, group}` objects. Infinite standard
/// errors are written as null.
pub fn estimates_plot_json(rows: &[EstimateRow]) -> serde_json::Value {
    let num = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
    serde_json::Value::Array(
        rows.iter()
            .map(|r| serde_json::json!({"term": r.term, "estimate": num(r.estimate), "se": num(r.se), "group": r.group}))
            .collect(),
    )
}
