//! Balanced choice datasets and the two strategy-attribution models.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, zscore_columns, FitOptions, RegressionResult, TermEstimate};
use super::stats::{mean, sample_variance, student_t_sf};
use super::AnalyticsError;
use crate::engine::TrialRecord;
use crate::recipes::ElementId;

pub const TRIAL: &str = "trial";
pub const UNCERTAINTY: &str = "uncertainty";
pub const EMPOWERMENT: &str = "empowerment";
pub const TEMPERATURE: &str = "temperature";
pub const TEMP_X_UNCERTAINTY: &str = "temperature:uncertainty";
pub const TEMP_X_EMPOWERMENT: &str = "temperature:empowerment";

/// One inventory element as valued at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementValue {
    pub element: ElementId,
    pub name: String,
    pub uncertainty: f64,
    pub empowerment: f64,
}

/// A row of the valuation snapshot CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub trial: usize,
    pub element: u32,
    pub name: String,
    pub uncertainty: f64,
    pub empowerment: f64,
}

/// A session together with its per-trial valuation snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub run_id: String,
    pub temperature: f64,
    pub trials: Vec<TrialRecord>,
    /// `snapshots[i]` is the inventory before trial `i`.
    pub snapshots: Vec<Vec<ElementValue>>,
}

impl RunData {
    /// Groups snapshot rows by trial index; trials without rows get an
    /// empty snapshot.
    pub fn from_rows(run_id: impl Into<String>, temperature: f64, trials: Vec<TrialRecord>, rows: Vec<SnapshotRow>) -> Self {
        let mut snapshots = vec![Vec::new(); trials.len()];
        for r in rows {
            if r.trial < snapshots.len() {
                snapshots[r.trial].push(ElementValue {
                    element: ElementId(r.element),
                    name: r.name,
                    uncertainty: r.uncertainty,
                    empowerment: r.empowerment,
                });
            }
        }
        RunData { run_id: run_id.into(), temperature, trials, snapshots }
    }
}

pub fn read_snapshot_csv<R: Read>(input: R) -> Result<Vec<SnapshotRow>, AnalyticsError> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().collect::<Result<Vec<SnapshotRow>, _>>().map_err(AnalyticsError::from)
}

pub fn write_snapshot_csv<W: Write>(rows: &[SnapshotRow], out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDatum {
    pub run_id: String,
    pub trial: usize,
    pub element: u32,
    pub chosen: u8,
    pub uncertainty: f64,
    pub empowerment: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDataset {
    /// Seed of the negative sampling.
    pub seed: u64,
    pub rows: Vec<ChoiceDatum>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The distinct inventory elements a trial used.
fn chosen_elements(record: &TrialRecord, inventory: &[ElementValue]) -> Vec<usize> {
    let mut picks = Vec::with_capacity(2);
    let mut add = |pos: Option<usize>| {
        if let Some(p) = pos {
            if !picks.contains(&p) {
                picks.push(p);
            }
        }
    };
    match record.resolved {
        Some(pair) => {
            add(inventory.iter().position(|v| v.element == pair.lo));
            add(inventory.iter().position(|v| v.element == pair.hi));
        }
        None => {
            add(inventory.iter().position(|v| v.name == record.proposed.0));
            add(inventory.iter().position(|v| v.name == record.proposed.1));
        }
    }
    picks
}

/// Per trial: the chosen inventory elements as positives and as many
/// distinct unchosen elements, drawn uniformly, as negatives. Trials whose
/// inventory cannot supply enough negatives contribute positives only.
/// Each run draws from its own stream derived from `seed` and the run id.
pub fn build_choice_dataset(runs: &[RunData], seed: u64) -> Result<ChoiceDataset, AnalyticsError> {
    let mut rows = Vec::new();
    for run in runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(&run.run_id));
        for (record, inventory) in run.trials.iter().zip(&run.snapshots) {
            let chosen = chosen_elements(record, inventory);
            if chosen.is_empty() {
                continue;
            }
            let datum = |v: &ElementValue, chosen: u8| ChoiceDatum {
                run_id: run.run_id.clone(),
                trial: record.index,
                element: v.element.0,
                chosen,
                uncertainty: v.uncertainty,
                empowerment: v.empowerment,
                temperature: run.temperature,
            };
            for &c in &chosen {
                rows.push(datum(&inventory[c], 1));
            }
            let others: Vec<usize> = (0..inventory.len()).filter(|i| !chosen.contains(i)).collect();
            if others.len() >= chosen.len() {
                for k in index::sample(&mut rng, others.len(), chosen.len()) {
                    rows.push(datum(&inventory[others[k]], 0));
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    Ok(ChoiceDataset { seed, rows })
}

pub fn write_choice_csv<W: Write>(rows: &[ChoiceDatum], out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_choice_csv<R: Read>(input: R) -> Result<Vec<ChoiceDatum>, AnalyticsError> {
    let mut rdr = csv::Reader::from_reader(input);
    let rows = rdr.deserialize().collect::<Result<Vec<ChoiceDatum>, _>>()?;
    if rows.iter().any(|r| !r.uncertainty.is_finite() || !r.empowerment.is_finite() || r.chosen > 1) {
        return Err(AnalyticsError::NonFinite);
    }
    Ok(rows)
}

fn by_run(data: &[ChoiceDatum]) -> BTreeMap<&str, Vec<&ChoiceDatum>> {
    let mut groups: BTreeMap<&str, Vec<&ChoiceDatum>> = BTreeMap::new();
    for d in data {
        groups.entry(d.run_id.as_str()).or_default().push(d);
    }
    groups
}

/// Trial index, uncertainty and empowerment, z-scored within the run.
fn run_features(rows: &[&ChoiceDatum]) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => rows[i].trial as f64,
        1 => rows[i].uncertainty,
        _ => rows[i].empowerment,
    });
    zscore_columns(&mut m);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model1Result {
    pub per_run: BTreeMap<String, RegressionResult>,
    pub pooled: IndexMap<String, PooledEstimate>,
}

/// Mean of per-run estimates with the across-run standard error; a single
/// run keeps its own standard error.
pub fn pool_estimates(per_run: &[&RegressionResult]) -> IndexMap<String, PooledEstimate> {
    let mut pooled = IndexMap::new();
    let Some(first) = per_run.first() else { return pooled };
    let k = per_run.len();
    for term in first.terms.keys() {
        let ests: Vec<TermEstimate> = per_run.iter().filter_map(|r| r.terms.get(term).copied()).collect();
        let values: Vec<f64> = ests.iter().map(|t| t.estimate).collect();
        let estimate = mean(&values);
        let (se, p) = if k == 1 {
            (ests[0].se, ests[0].p)
        } else {
            let se = (sample_variance(&values) / k as f64).sqrt();
            let z = if se > 0.0 { estimate / se } else { 0.0 };
            let p = if se > 0.0 { (2.0 * student_t_sf(z.abs(), (k - 1) as f64)).min(1.0) } else { 1.0 };
            (se, p)
        };
        let z = if se > 0.0 && se.is_finite() { estimate / se } else { 0.0 };
        pooled.insert(term.clone(), PooledEstimate { estimate, se, z, p, runs: k });
    }
    pooled
}

/// Per run: `chosen ~ 1 + trial + uncertainty + empowerment` on z-scored
/// features, then pooled across runs. Runs are fitted concurrently and
/// reduced in run-id order.
pub fn run_model1(data: &[ChoiceDatum], opts: FitOptions) -> Result<Model1Result, AnalyticsError> {
    if data.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let groups: Vec<(&str, Vec<&ChoiceDatum>)> = by_run(data).into_iter().collect();
    let fits: Vec<Result<RegressionResult, AnalyticsError>> = groups
        .par_iter()
        .map(|(_, rows)| {
            let x = run_features(rows);
            let y: Vec<bool> = rows.iter().map(|r| r.chosen == 1).collect();
            fit_logistic(&x, &[TRIAL, UNCERTAINTY, EMPOWERMENT], &y, opts)
        })
        .collect();
    let mut per_run = BTreeMap::new();
    for ((run, _), fit) in groups.iter().zip(fits) {
        let fit = fit.map_err(|e| AnalyticsError::InRun { run_id: run.to_string(), source: Box::new(e) })?;
        per_run.insert(run.to_string(), fit);
    }
    let refs: Vec<&RegressionResult> = per_run.values().collect();
    let pooled = pool_estimates(&refs);
    Ok(Model1Result { per_run, pooled })
}

/// Pooled fit with main effects, temperature on its natural scale and the
/// temperature × uncertainty and temperature × empowerment interactions.
/// Trial, uncertainty and empowerment are z-scored within run.
pub fn run_model2(data: &[ChoiceDatum], opts: FitOptions) -> Result<RegressionResult, AnalyticsError> {
    if data.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let mut temps: Vec<f64> = data.iter().map(|d| d.temperature).collect();
    temps.sort_by(f64::total_cmp);
    temps.dedup();
    if temps.len() < 2 {
        return Err(AnalyticsError::InsufficientTemperatureVariation);
    }
    let groups = by_run(data);
    let n = data.len();
    let mut x = DMatrix::zeros(n, 6);
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for rows in groups.values() {
        let f = run_features(rows);
        for (i, d) in rows.iter().enumerate() {
            let t = d.temperature;
            let vals = [f[(i, 0)], f[(i, 1)], f[(i, 2)], t, t * f[(i, 1)], t * f[(i, 2)]];
            for (j, v) in vals.into_iter().enumerate() {
                x[(row, j)] = v;
            }
            y.push(d.chosen == 1);
            row += 1;
        }
    }
    fit_logistic(
        &x,
        &[TRIAL, UNCERTAINTY, EMPOWERMENT, TEMPERATURE, TEMP_X_UNCERTAINTY, TEMP_X_EMPOWERMENT],
        &y,
        opts,
    )
}
