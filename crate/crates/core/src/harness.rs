//! Experiment orchestration, persistence and replay.
//!
//! A run plays `|temperatures| × repetitions` sessions. Session `i` (in
//! temperature-major order) is seeded with `seed_base + i`, for both the
//! session and a scripted agent's random stream, so results do not depend
//! on scheduling. Each session writes
//!
//! - `session_XXX.jsonl`: the trial log,
//! - `session_XXX.values.csv`: uncertainty and empowerment of every
//!   inventory element before each trial,
//!
//! and `manifest.json` is written last.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    Agent, AgentError, AgentPolicy, LlmAgent, LlmClient, LlmEndpointConfig, PolicyKind, PromptVariant, ScriptedAgent,
    ValueWeights,
};
use crate::analytics::{read_snapshot_csv, write_snapshot_csv, AnalyticsError, RunData, SnapshotRow};
use crate::engine::{read_trial_log, write_trial_log, SessionConfig, SessionState, SessionSummary, TrialLogError, TrialLogHeader};
use crate::recipes::{load_graph, RecipeError, RecipeGraph};
use crate::valuation::{base_empowerment, EmpowermentParams, EmpowermentTable, UncertaintyState};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Validation(String),
    #[error("cannot parse config: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    LogCorrupt(#[from] TrialLogError),
    #[error("log was recorded on graph {expected}, replaying on {found}")]
    GraphMismatch { expected: String, found: String },
    #[error("replay diverged from the log at trial {0}")]
    ReplayDivergence(usize),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which agent plays the sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentSpec {
    /// A scripted policy. Unless `sampling_temperature` is set, the run
    /// temperature is the softmax temperature. `uncertainty_slope` adds
    /// `slope · τ` to the uncertainty weight.
    Scripted {
        policy: PolicyKind,
        #[serde(default)]
        weights: ValueWeights,
        #[serde(default)]
        sampling_temperature: Option<f64>,
        #[serde(default)]
        uncertainty_slope: Option<f64>,
    },
    /// A chat-completions endpoint; the run temperature is the sampling
    /// temperature.
    Llm {
        endpoint: LlmEndpointConfig,
        #[serde(default)]
        variant: PromptVariant,
    },
}

impl AgentSpec {
    pub fn scripted(policy: PolicyKind, weights: ValueWeights) -> Self {
        AgentSpec::Scripted { policy, weights, sampling_temperature: None, uncertainty_slope: None }
    }

    /// The scripted policy used at run temperature `tau`.
    pub fn policy_at(&self, tau: f64, seed: u64) -> Option<AgentPolicy> {
        match self {
            AgentSpec::Scripted { policy, weights, sampling_temperature, uncertainty_slope } => {
                let mut weights = *weights;
                if let Some(slope) = uncertainty_slope {
                    weights.uncertainty += slope * tau;
                }
                Some(AgentPolicy { kind: *policy, weights, temperature: sampling_temperature.unwrap_or(tau), seed })
            }
            AgentSpec::Llm { .. } => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AgentSpec::Scripted { policy, .. } => serde_json::to_value(policy)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            AgentSpec::Llm { endpoint, .. } => endpoint.model.clone(),
        }
    }
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub graph: PathBuf,
    pub agent: AgentSpec,
    pub temperatures: Vec<f64>,
    pub repetitions: usize,
    pub max_trials: usize,
    #[serde(default)]
    pub seed_base: u64,
    pub output_dir: PathBuf,
    /// Sessions played at the same time.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub empowerment: EmpowermentParams,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut config = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // relative paths are relative to the config file
        if let Some(dir) = path.parent() {
            if config.graph.is_relative() {
                config.graph = dir.join(&config.graph);
            }
            if config.output_dir.is_relative() {
                config.output_dir = dir.join(&config.output_dir);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Validation(m.to_string()));
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1");
        }
        if self.max_trials == 0 {
            return fail("max_trials must be at least 1");
        }
        if self.temperatures.is_empty() {
            return fail("temperatures must be non-empty");
        }
        if self.temperatures.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return fail("temperatures must be finite and >= 0");
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1");
        }
        match &self.agent {
            AgentSpec::Scripted { policy: PolicyKind::Llm, .. } => fail("use the llm agent type for LLM policies"),
            AgentSpec::Scripted { .. } => {
                for t in &self.temperatures {
                    self.agent.policy_at(*t, 0).expect("scripted").validate()?;
                }
                Ok(())
            }
            AgentSpec::Llm { endpoint, .. } => Ok(endpoint.validate()?),
        }
    }

    pub fn session_count(&self) -> usize {
        self.temperatures.len() * self.repetitions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub index: usize,
    pub temperature: f64,
    pub repetition: usize,
    pub seed: u64,
    pub log: PathBuf,
    pub values: PathBuf,
    pub summary: SessionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedSession {
    pub index: usize,
    pub temperature: f64,
    pub repetition: usize,
    pub seed: u64,
    pub trials_completed: usize,
    pub error: String,
    /// Partial log of the trials played before the failure.
    pub log: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub graph_hash: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub code_version: String,
    pub sessions: Vec<SessionEntry>,
    pub aborted: Vec<AbortedSession>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Paths in the manifest are relative to its directory.
    pub fn load_runs(&self, dir: &Path) -> Result<Vec<RunData>, HarnessError> {
        self.sessions.iter().map(|s| load_run_data(&dir.join(&s.log), &dir.join(&s.values), s.temperature)).collect()
    }
}

/// Log and snapshot of a finished session, ready for the choice dataset.
/// The run id is the log's file stem.
pub fn load_run_data(log: &Path, values: &Path, temperature: f64) -> Result<RunData, HarnessError> {
    let (_, trials) = read_trial_log(BufReader::new(File::open(log)?))?;
    let rows = read_snapshot_csv(BufReader::new(File::open(values)?))?;
    let run_id = log.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(RunData::from_rows(run_id, temperature, trials, rows))
}

/// A played session with its per-trial valuation snapshots.
#[derive(Debug, Clone)]
pub struct PlayedSession {
    pub state: SessionState,
    pub table: EmpowermentTable,
    pub snapshots: Vec<SnapshotRow>,
}

fn snapshot(state: &SessionState, table: &EmpowermentTable, out: &mut Vec<SnapshotRow>) {
    let u = UncertaintyState::from_session(state);
    let trial = state.trials();
    for e in state.inventory() {
        out.push(SnapshotRow {
            trial,
            element: e.0,
            name: state.graph().name(*e).to_string(),
            uncertainty: u.value(*e),
            empowerment: table.value(*e),
        });
    }
}

/// Plays `max_trials` trials. On an agent failure the partial session is
/// returned next to the error.
pub fn play_session(
    graph: Arc<RecipeGraph>,
    agent: &mut dyn Agent,
    seed: u64,
    max_trials: usize,
    params: EmpowermentParams,
) -> Result<PlayedSession, (PlayedSession, AgentError)> {
    let table = base_empowerment(&graph, params);
    let state = SessionState::new(graph, seed, SessionConfig { max_trials: Some(max_trials) });
    let mut played = PlayedSession { state, table, snapshots: Vec::new() };
    while !played.state.is_closed() {
        snapshot(&played.state, &played.table, &mut played.snapshots);
        let proposal = match agent.propose(&played.state, &played.table) {
            Ok(p) => p,
            Err(e) => {
                let t = played.state.trials();
                played.snapshots.retain(|r| r.trial < t);
                return Err((played, e));
            }
        };
        let record = played
            .state
            .apply_with_meta(&proposal.a, &proposal.b, proposal.meta)
            .expect("session is open");
        played.table.apply_trial(&record);
    }
    Ok(played)
}

fn write_session_files(played: &PlayedSession, log: &Path, values: &Path, label: &str) -> Result<(), HarnessError> {
    let header = TrialLogHeader::for_session(&played.state, Some(label.to_string()));
    write_trial_log(BufWriter::new(File::create(log)?), &header, played.state.history())?;
    write_snapshot_csv(&played.snapshots, BufWriter::new(File::create(values)?))?;
    Ok(())
}

enum Outcome {
    Done(SessionEntry),
    Aborted(AbortedSession),
}

fn make_agent(spec: &AgentSpec, client: Option<&LlmClient>, tau: f64, seed: u64) -> Result<Box<dyn Agent>, HarnessError> {
    Ok(match spec {
        AgentSpec::Scripted { .. } => Box::new(ScriptedAgent::new(spec.policy_at(tau, seed).expect("scripted"))?),
        AgentSpec::Llm { variant, .. } => {
            Box::new(LlmAgent::new(client.expect("client built for llm runs").with_temperature(tau), *variant))
        }
    })
}

/// Runs every session of the experiment and writes the manifest last.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    let started_at = Utc::now();
    let graph = Arc::new(load_graph(&config.graph)?);
    let client = match &config.agent {
        AgentSpec::Llm { endpoint, .. } => Some(LlmClient::new(endpoint.clone())?),
        AgentSpec::Scripted { .. } => None,
    };
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;

    let jobs: Vec<(usize, f64, usize)> = config
        .temperatures
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..config.repetitions).map(move |r| (ti * config.repetitions + r, *t, r)))
        .collect();
    let label = config.agent.label();
    let run_one = |&(index, temperature, repetition): &(usize, f64, usize)| -> Result<Outcome, HarnessError> {
        let seed = config.seed_base + index as u64;
        let mut agent = make_agent(&config.agent, client.as_ref(), temperature, seed)?;
        let log = PathBuf::from(format!("session_{index:03}.jsonl"));
        let values = PathBuf::from(format!("session_{index:03}.values.csv"));
        let session_label = format!("{label} t={temperature} rep={repetition}");
        match play_session(graph.clone(), agent.as_mut(), seed, config.max_trials, config.empowerment) {
            Ok(played) => {
                write_session_files(&played, &dir.join(&log), &dir.join(&values), &session_label)?;
                Ok(Outcome::Done(SessionEntry {
                    index,
                    temperature,
                    repetition,
                    seed,
                    log,
                    values,
                    summary: played.state.summary(),
                }))
            }
            Err((played, err)) => {
                log::error!("session {index} aborted: {err}");
                write_session_files(&played, &dir.join(&log), &dir.join(&values), &session_label)?;
                Ok(Outcome::Aborted(AbortedSession {
                    index,
                    temperature,
                    repetition,
                    seed,
                    trials_completed: played.state.trials(),
                    error: err.to_string(),
                    log,
                }))
            }
        }
    };
    let outcomes: Vec<Result<Outcome, HarnessError>> = if config.parallelism > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run_one).collect())
    } else {
        jobs.iter().map(run_one).collect()
    };
    let mut sessions = Vec::new();
    let mut aborted = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Done(s) => sessions.push(s),
            Outcome::Aborted(a) => aborted.push(a),
        }
    }
    let manifest = RunManifest {
        run_id: format!("run-{}-{}", started_at.format("%Y%m%dT%H%M%S"), config.seed_base),
        config: config.clone(),
        graph_hash: graph.content_hash().to_string(),
        started_at,
        finished_at: Utc::now(),
        code_version: CODE_VERSION.to_string(),
        sessions,
        aborted,
    };
    let file = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(manifest)
}

/// Re-applies every logged proposal and checks the outcome matches the log.
pub fn replay_session(log: &Path, graph: Arc<RecipeGraph>) -> Result<SessionState, HarnessError> {
    let (header, records) = read_trial_log(BufReader::new(File::open(log)?))?;
    if header.graph_hash != graph.content_hash() {
        return Err(HarnessError::GraphMismatch {
            expected: header.graph_hash,
            found: graph.content_hash().to_string(),
        });
    }
    let mut state = SessionState::new(graph, header.seed, SessionConfig { max_trials: header.max_trials });
    for r in &records {
        let replayed = state
            .apply_with_meta(&r.proposed.0, &r.proposed.1, r.agent_meta.clone())
            .map_err(|_| HarnessError::ReplayDivergence(r.index))?;
        if !replayed.same_outcome(r) {
            return Err(HarnessError::ReplayDivergence(r.index));
        }
    }
    Ok(state)
}
