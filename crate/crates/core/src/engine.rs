//! Trial-by-trial play sessions and behavior categorization.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recipes::{normalize_name, CanonicalPair, ElementId, RecipeGraph};

/// Schema version written in every trial-log line.
pub const TRIAL_LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("session is closed after {0} trials")]
    SessionClosed(usize),
}

/// Five-way classification of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorCategory {
    FailureExisting,
    FailureNew,
    SuccessNew,
    SuccessExisting,
    Invalid,
}

impl BehaviorCategory {
    pub const ALL: [BehaviorCategory; 5] = [
        BehaviorCategory::FailureExisting,
        BehaviorCategory::FailureNew,
        BehaviorCategory::SuccessNew,
        BehaviorCategory::SuccessExisting,
        BehaviorCategory::Invalid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorCategory::FailureExisting => "failure_existing",
            BehaviorCategory::FailureNew => "failure_new",
            BehaviorCategory::SuccessNew => "success_new",
            BehaviorCategory::SuccessExisting => "success_existing",
            BehaviorCategory::Invalid => "invalid",
        }
    }
}

/// Invalid if not valid; otherwise success/failure crossed with whether
/// the pair was attempted before.
pub fn categorize_trial(valid: bool, success: bool, pair_seen_before: bool) -> BehaviorCategory {
    match (valid, success, pair_seen_before) {
        (false, _, _) => BehaviorCategory::Invalid,
        (true, true, false) => BehaviorCategory::SuccessNew,
        (true, true, true) => BehaviorCategory::SuccessExisting,
        (true, false, false) => BehaviorCategory::FailureNew,
        (true, false, true) => BehaviorCategory::FailureExisting,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub proposed: (String, String),
    pub resolved: Option<CanonicalPair>,
    pub valid: bool,
    pub success: bool,
    pub results: Vec<ElementId>,
    pub novel_results: Vec<ElementId>,
    pub category: BehaviorCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_meta: Option<serde_json::Value>,
}

impl TrialRecord {
    /// Field-wise equality ignoring `agent_meta`.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        self.index == other.index
            && self.proposed == other.proposed
            && self.resolved == other.resolved
            && self.valid == other.valid
            && self.success == other.success
            && self.results == other.results
            && self.novel_results == other.novel_results
            && self.category == other.category
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Trials allowed before the session closes; `None` is unbounded.
    pub max_trials: Option<usize>,
}

/// One play-through over a shared graph.
#[derive(Debug, Clone)]
pub struct SessionState {
    graph: Arc<RecipeGraph>,
    config: SessionConfig,
    seed: u64,
    inventory: IndexSet<ElementId>,
    usage: Vec<u32>,
    history: Vec<TrialRecord>,
    tried: HashSet<CanonicalPair>,
}

impl SessionState {
    pub fn new(graph: Arc<RecipeGraph>, seed: u64, config: SessionConfig) -> Self {
        let inventory: IndexSet<ElementId> = graph.initial_elements().into_iter().collect();
        let usage = vec![0; graph.len()];
        SessionState { graph, config, seed, inventory, usage, history: Vec::new(), tried: HashSet::new() }
    }

    pub fn graph(&self) -> &Arc<RecipeGraph> {
        &self.graph
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Inventory in insertion order.
    pub fn inventory(&self) -> &IndexSet<ElementId> {
        &self.inventory
    }

    pub fn inventory_vec(&self) -> Vec<ElementId> {
        self.inventory.iter().copied().collect()
    }

    pub fn inventory_names(&self) -> Vec<String> {
        self.inventory.iter().map(|e| self.graph.name(*e).to_string()).collect()
    }

    pub fn has(&self, e: ElementId) -> bool {
        self.inventory.contains(&e)
    }

    /// Total trials so far (`T`).
    pub fn trials(&self) -> usize {
        self.history.len()
    }

    /// Times `e` has been chosen (`t_e`).
    pub fn usage(&self, e: ElementId) -> u32 {
        self.usage.get(e.index()).copied().unwrap_or(0)
    }

    pub fn usage_counts(&self) -> &[u32] {
        &self.usage
    }

    pub fn history(&self) -> &[TrialRecord] {
        &self.history
    }

    pub fn was_tried(&self, pair: CanonicalPair) -> bool {
        self.tried.contains(&pair)
    }

    pub fn is_closed(&self) -> bool {
        self.config.max_trials.is_some_and(|m| self.history.len() >= m)
    }

    pub fn apply_combination(&mut self, a: &str, b: &str) -> Result<TrialRecord, EngineError> {
        self.apply_with_meta(a, b, None)
    }

    /// Plays one trial. Names outside the inventory make the trial invalid
    /// but still count it; only inventory names add to usage counts.
    pub fn apply_with_meta(
        &mut self,
        a: &str,
        b: &str,
        agent_meta: Option<serde_json::Value>,
    ) -> Result<TrialRecord, EngineError> {
        if self.is_closed() {
            return Err(EngineError::SessionClosed(self.history.len()));
        }
        let proposed = (normalize_name(a), normalize_name(b));
        let lookup = |name: &str| self.graph.id_of(name).filter(|e| self.inventory.contains(e));
        let ids = (lookup(&proposed.0), lookup(&proposed.1));
        for e in [ids.0, ids.1].into_iter().flatten() {
            self.usage[e.index()] += 1;
        }
        let index = self.history.len();
        let record = match ids {
            (Some(x), Some(y)) => {
                let pair = CanonicalPair::new(x, y);
                let seen = !self.tried.insert(pair);
                let results = self.graph.lookup(pair).map(|r| r.results.clone()).unwrap_or_default();
                let success = !results.is_empty();
                let novel_results: Vec<ElementId> =
                    results.iter().copied().filter(|r| !self.inventory.contains(r)).collect();
                self.inventory.extend(novel_results.iter().copied());
                TrialRecord {
                    index,
                    proposed,
                    resolved: Some(pair),
                    valid: true,
                    success,
                    results,
                    novel_results,
                    category: categorize_trial(true, success, seen),
                    agent_meta,
                }
            }
            _ => TrialRecord {
                index,
                proposed,
                resolved: None,
                valid: false,
                success: false,
                results: Vec::new(),
                novel_results: Vec::new(),
                category: BehaviorCategory::Invalid,
                agent_meta,
            },
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn summary(&self) -> SessionSummary {
        session_summary(self)
    }
}

pub fn new_session(graph: Arc<RecipeGraph>, seed: u64, config: SessionConfig) -> SessionState {
    SessionState::new(graph, seed, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    /// Elements found beyond the four initial ones.
    pub discoveries: usize,
    pub inventory_size: usize,
    pub trials: usize,
    pub category_counts: BTreeMap<BehaviorCategory, usize>,
}

pub fn session_summary(state: &SessionState) -> SessionSummary {
    let mut category_counts: BTreeMap<BehaviorCategory, usize> =
        BehaviorCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for r in state.history() {
        *category_counts.entry(r.category).or_default() += 1;
    }
    let initial = state.graph().initial_elements().len();
    SessionSummary {
        discoveries: state.inventory().len() - initial,
        inventory_size: state.inventory().len(),
        trials: state.trials(),
        category_counts,
    }
}

/// First line of a trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLogHeader {
    pub v: u32,
    pub kind: String,
    pub graph_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl TrialLogHeader {
    pub fn for_session(state: &SessionState, label: Option<String>) -> Self {
        TrialLogHeader {
            v: TRIAL_LOG_VERSION,
            kind: "session".into(),
            graph_hash: state.graph().content_hash().to_string(),
            seed: state.seed(),
            max_trials: state.config().max_trials,
            label,
        }
    }
}

#[derive(Serialize)]
struct TrialLineRef<'a> {
    v: u32,
    #[serde(flatten)]
    record: &'a TrialRecord,
}

#[derive(Deserialize)]
struct TrialLine {
    v: u32,
    #[serde(flatten)]
    record: TrialRecord,
}

pub fn trial_line(record: &TrialRecord) -> String {
    serde_json::to_string(&TrialLineRef { v: TRIAL_LOG_VERSION, record }).expect("record serializes")
}

#[derive(Debug, Error)]
pub enum TrialLogError {
    #[error("io error reading trial log: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt trial log at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
}

/// Writes a header line followed by one line per trial.
pub fn write_trial_log<W: Write>(
    mut out: W,
    header: &TrialLogHeader,
    records: &[TrialRecord],
) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"))?;
    for r in records {
        writeln!(out, "{}", trial_line(r))?;
    }
    out.flush()
}

pub fn read_trial_log<R: BufRead>(input: R) -> Result<(TrialLogHeader, Vec<TrialRecord>), TrialLogError> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |detail: String| TrialLogError::Corrupt { line: line_no, detail };
        if header.is_none() {
            let h: TrialLogHeader = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            if h.v != TRIAL_LOG_VERSION {
                return Err(corrupt(format!("unsupported log version {}", h.v)));
            }
            header = Some(h);
            continue;
        }
        let parsed: TrialLine = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if parsed.v != TRIAL_LOG_VERSION {
            return Err(corrupt(format!("unsupported record version {}", parsed.v)));
        }
        if parsed.record.index != records.len() {
            return Err(corrupt(format!(
                "expected trial index {}, found {}",
                records.len(),
                parsed.record.index
            )));
        }
        records.push(parsed.record);
    }
    let header = header.ok_or(TrialLogError::Corrupt { line: 1, detail: "missing header".into() })?;
    Ok((header, records))
}
