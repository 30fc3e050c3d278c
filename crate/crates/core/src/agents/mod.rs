//! Decision policies: one proposed combination per trial.
//!
//! Scripted baselines score every canonical pair of the current inventory
//!
//! ```text
//! score(a, b) = w_u · (U_a + U_b) / 2 + w_e · combination_empowerment(a, b)
//! ```
//!
//! (or, with [`EmpowermentTerm::Elements`], `w_e · (E_a + E_b) / 2`)
//! and either sample from the Boltzmann distribution over scores or pick the
//! best untried pair. The LLM adapter renders the game state into a prompt
//! and parses a `X + Y` reply.

mod llm;
mod prompt;

pub use llm::{ChatMessage, ChatReply, LlmClient, LlmEndpointConfig, LlmProposal, TokenUsage};
pub use prompt::{parse_reply, render_prompt, HistoryWindow, PromptBundle, PromptVariant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SessionState;
use crate::recipes::{sample_uniform_pair, CanonicalPair, ElementId};
use crate::valuation::{uncertainty, EmpowermentTable};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("reply contains no `X + Y` combination: {0:?}")]
    UnparseableReply(String),
    #[error("transport error after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    SoftmaxValue,
    GreedyValue,
    Llm,
}

/// What the empowerment part of a pair score measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpowermentTerm {
    /// Mean value of the pair's results, 0 when the pair is no recipe.
    #[default]
    Combination,
    /// Mean value of the two elements themselves.
    Elements,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueWeights {
    pub uncertainty: f64,
    pub empowerment: f64,
    #[serde(default)]
    pub empowerment_term: EmpowermentTerm,
}

impl ValueWeights {
    pub fn new(uncertainty: f64, empowerment: f64) -> Self {
        ValueWeights { uncertainty, empowerment, empowerment_term: EmpowermentTerm::Combination }
    }

    pub fn with_term(self, empowerment_term: EmpowermentTerm) -> Self {
        ValueWeights { empowerment_term, ..self }
    }
}

impl Default for ValueWeights {
    fn default() -> Self {
        ValueWeights::new(1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub weights: ValueWeights,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AgentPolicy {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(AgentError::Config(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        if !self.weights.uncertainty.is_finite() || !self.weights.empowerment.is_finite() {
            return Err(AgentError::Config("value weights must be finite".into()));
        }
        Ok(())
    }
}

/// Inventory sorted by id, so pairs enumerate in canonical order.
fn sorted_inventory(state: &SessionState) -> Vec<ElementId> {
    let mut items = state.inventory_vec();
    items.sort();
    items
}

pub fn propose_random<R: Rng + ?Sized>(state: &SessionState, rng: &mut R) -> CanonicalPair {
    sample_uniform_pair(&sorted_inventory(state), rng)
}

/// Every canonical pair of the inventory with its value score, in
/// canonical order.
pub fn pair_scores(state: &SessionState, table: &EmpowermentTable, weights: ValueWeights) -> Vec<(CanonicalPair, f64)> {
    let items = sorted_inventory(state);
    let total = state.trials() as u64;
    let bonus: Vec<f64> = items.iter().map(|e| uncertainty(total, state.usage(*e) as u64)).collect();
    let graph = state.graph();
    let mut out = Vec::with_capacity(items.len() * (items.len() + 1) / 2);
    for i in 0..items.len() {
        for j in i..items.len() {
            let pair = CanonicalPair::new(items[i], items[j]);
            let mut score = 0.0;
            if weights.uncertainty != 0.0 {
                score += weights.uncertainty * (bonus[i] + bonus[j]) / 2.0;
            }
            if weights.empowerment != 0.0 {
                let e = match weights.empowerment_term {
                    EmpowermentTerm::Combination => graph.lookup(pair).map_or(0.0, |r| {
                        r.results.iter().map(|x| table.value(*x)).sum::<f64>() / r.results.len() as f64
                    }),
                    EmpowermentTerm::Elements => (table.value(pair.lo) + table.value(pair.hi)) / 2.0,
                };
                score += weights.empowerment * e;
            }
            out.push((pair, score));
        }
    }
    out
}

/// First maximum in iteration order.
fn argmax(scored: &[(CanonicalPair, f64)]) -> CanonicalPair {
    let mut best = scored[0];
    for s in &scored[1..] {
        if s.1 > best.1 {
            best = *s;
        }
    }
    best.0
}

/// Samples a pair with probability proportional to `exp(score / τ)`;
/// `τ = 0` takes the argmax, ties going to the canonically smallest pair.
pub fn propose_softmax<R: Rng + ?Sized>(
    state: &SessionState,
    table: &EmpowermentTable,
    policy: &AgentPolicy,
    rng: &mut R,
) -> CanonicalPair {
    let scored = pair_scores(state, table, policy.weights);
    sample_boltzmann(&scored, policy.temperature, rng)
}

pub fn sample_boltzmann<R: Rng + ?Sized>(scored: &[(CanonicalPair, f64)], temperature: f64, rng: &mut R) -> CanonicalPair {
    assert!(!scored.is_empty());
    if temperature == 0.0 {
        return argmax(scored);
    }
    let max = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scored.iter().map(|s| ((s.1 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (s, w) in scored.iter().zip(&weights) {
        if u < *w {
            return s.0;
        }
        u -= w;
    }
    scored[scored.len() - 1].0
}

/// Best-scoring pair among those not yet attempted in the session (all
/// pairs once every pair has been tried). Ties are broken uniformly at
/// random.
pub fn propose_greedy<R: Rng + ?Sized>(
    state: &SessionState,
    table: &EmpowermentTable,
    policy: &AgentPolicy,
    rng: &mut R,
) -> CanonicalPair {
    let scored = pair_scores(state, table, policy.weights);
    let untried: Vec<(CanonicalPair, f64)> = scored.iter().copied().filter(|(p, _)| !state.was_tried(*p)).collect();
    let pool = if untried.is_empty() { &scored } else { &untried };
    let max = pool.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let best: Vec<CanonicalPair> = pool.iter().filter(|s| s.1 == max).map(|s| s.0).collect();
    best[rng.random_range(0..best.len())]
}

/// What an agent wants to play next.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub a: String,
    pub b: String,
    pub meta: Option<serde_json::Value>,
}

impl Proposal {
    pub fn from_pair(state: &SessionState, pair: CanonicalPair) -> Self {
        let g = state.graph();
        Proposal { a: g.name(pair.lo).to_string(), b: g.name(pair.hi).to_string(), meta: None }
    }
}

pub trait Agent: Send {
    fn propose(&mut self, state: &SessionState, table: &EmpowermentTable) -> Result<Proposal, AgentError>;
}

/// Random, softmax and greedy baselines with their own seeded stream.
pub struct ScriptedAgent {
    policy: AgentPolicy,
    rng: ChaCha8Rng,
}

impl ScriptedAgent {
    pub fn new(policy: AgentPolicy) -> Result<Self, AgentError> {
        policy.validate()?;
        if policy.kind == PolicyKind::Llm {
            return Err(AgentError::Config("LLM policies need an endpoint; use LlmAgent".into()));
        }
        Ok(ScriptedAgent { rng: ChaCha8Rng::seed_from_u64(policy.seed), policy })
    }

    pub fn policy(&self) -> &AgentPolicy {
        &self.policy
    }
}

impl Agent for ScriptedAgent {
    fn propose(&mut self, state: &SessionState, table: &EmpowermentTable) -> Result<Proposal, AgentError> {
        let pair = match self.policy.kind {
            PolicyKind::Random => propose_random(state, &mut self.rng),
            PolicyKind::SoftmaxValue => propose_softmax(state, table, &self.policy, &mut self.rng),
            PolicyKind::GreedyValue => propose_greedy(state, table, &self.policy, &mut self.rng),
            PolicyKind::Llm => unreachable!("rejected in ScriptedAgent::new"),
        };
        Ok(Proposal::from_pair(state, pair))
    }
}

/// Chat-completions backed agent. Unparseable replies become proposals of
/// empty names, which the engine records as invalid trials.
pub struct LlmAgent {
    client: LlmClient,
    variant: PromptVariant,
}

impl LlmAgent {
    pub fn new(client: LlmClient, variant: PromptVariant) -> Self {
        LlmAgent { client, variant }
    }
}

impl Agent for LlmAgent {
    fn propose(&mut self, state: &SessionState, _table: &EmpowermentTable) -> Result<Proposal, AgentError> {
        let proposal = self.client.propose(state, self.variant)?;
        let meta = Some(proposal.meta_json());
        Ok(match proposal.pair {
            Some((a, b)) => Proposal { a, b, meta },
            None => Proposal { a: String::new(), b: String::new(), meta },
        })
    }
}
