//! Empowerment and uncertainty values per element.
//!
//! Empowerment is computed exactly from the recipe graph. An element's
//! base value counts the recipes it takes part in and, up to a fixed depth,
//! the discounted value of what those recipes produce:
//!
//! ```text
//! E_0(e) = |{c : e ∈ c}|
//! E_k(e) = Σ_{c ∋ e} [ 1 + γ · mean_{r ∈ results(c)} E_{k-1}(r) ]
//! ```
//!
//! The recursion is depth-limited because the unbounded sum diverges on
//! cyclic graphs. During play the table is adjusted multiplicatively after
//! each trial (see [`EmpowermentTable::apply_trial`]).
//!
//! Uncertainty is the count-based bonus `sqrt(ln T / (t_e + 1))`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{SessionState, TrialRecord};
use crate::recipes::{CanonicalPair, ElementId, RecipeError, RecipeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpowermentParams {
    pub depth: u32,
    pub discount: f64,
    pub increase_factor: f64,
    pub decrease_factor: f64,
}

impl Default for EmpowermentParams {
    fn default() -> Self {
        EmpowermentParams { depth: 3, discount: 0.5, increase_factor: 1.05, decrease_factor: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpowermentTable {
    values: Vec<f64>,
    pub params: EmpowermentParams,
}

impl EmpowermentTable {
    pub fn value(&self, e: ElementId) -> f64 {
        self.values[e.index()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn from_values(values: Vec<f64>, params: EmpowermentParams) -> Self {
        EmpowermentTable { values, params }
    }

    /// Multiplicative update after one trial: novel success raises both
    /// chosen elements, a valid failure lowers them, anything else leaves the
    /// table alone. A self-pair adjusts its element once.
    pub fn apply_trial(&mut self, record: &TrialRecord) {
        let Some(pair) = record.resolved.filter(|_| record.valid) else {
            return;
        };
        let factor = if record.success && !record.novel_results.is_empty() {
            self.params.increase_factor
        } else if !record.success {
            self.params.decrease_factor
        } else {
            return;
        };
        for e in pair.members() {
            self.values[e.index()] *= factor;
        }
    }

    /// CSV with columns `element,name,value`.
    pub fn write_csv<W: Write>(&self, graph: &RecipeGraph, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["element", "name", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            let id = ElementId(i as u32);
            w.write_record([id.to_string(), graph.name(id).to_string(), format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn base_empowerment(graph: &RecipeGraph, params: EmpowermentParams) -> EmpowermentTable {
    assert!((0.0..=1.0).contains(&params.discount), "discount must lie in [0, 1]");
    let n = graph.len();
    let mut values: Vec<f64> = (0..n).map(|i| graph.recipe_count_with(ElementId(i as u32)) as f64).collect();
    for _ in 0..params.depth {
        let prev = values.clone();
        for (i, slot) in values.iter_mut().enumerate() {
            *slot = graph
                .recipes_with(ElementId(i as u32))
                .map(|r| 1.0 + params.discount * mean_over(&prev, &r.results))
                .sum();
        }
    }
    EmpowermentTable { values, params }
}

fn mean_over(values: &[f64], ids: &[ElementId]) -> f64 {
    ids.iter().map(|r| values[r.index()]).sum::<f64>() / ids.len() as f64
}

/// Ground-truth specialization of the combination value: zero when the pair
/// is not a recipe, otherwise the mean table value over its results.
pub fn combination_empowerment(
    table: &EmpowermentTable,
    graph: &RecipeGraph,
    pair: CanonicalPair,
) -> Result<f64, RecipeError> {
    let pair = graph.canonical_pair(pair.lo, pair.hi)?;
    Ok(graph.lookup(pair).map_or(0.0, |r| mean_over(&table.values, &r.results)))
}

pub fn update_empowerment(table: &EmpowermentTable, record: &TrialRecord) -> EmpowermentTable {
    let mut next = table.clone();
    next.apply_trial(record);
    next
}

/// `sqrt(ln T / (t_e + 1))`, and 0 while `T <= 1`.
pub fn uncertainty(total_trials: u64, times_chosen: u64) -> f64 {
    if total_trials <= 1 {
        return 0.0;
    }
    ((total_trials as f64).ln() / (times_chosen as f64 + 1.0)).sqrt()
}

/// Trial count and per-element choice counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertaintyState {
    pub total_trials: u64,
    pub counts: Vec<u32>,
}

impl UncertaintyState {
    pub fn from_session(state: &SessionState) -> Self {
        UncertaintyState { total_trials: state.trials() as u64, counts: state.usage_counts().to_vec() }
    }

    pub fn value(&self, e: ElementId) -> f64 {
        uncertainty(self.total_trials, self.counts[e.index()] as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{BehaviorCategory, SessionConfig};
    use crate::synthetic::g4;
    use std::sync::Arc;

    fn names(g: &RecipeGraph, t: &EmpowermentTable) -> Vec<(String, f64)> {
        g.elements().iter().map(|e| (e.name.clone(), t.value(e.id))).collect()
    }

    #[test]
    fn g4_depth_zero_counts() {
        let g = g4();
        let t = base_empowerment(&g, EmpowermentParams { depth: 0, ..Default::default() });
        let expected = [
            ("water", 2.0),
            ("fire", 2.0),
            ("earth", 2.0),
            ("air", 1.0),
            ("steam", 0.0),
            ("mud", 1.0),
            ("dust", 0.0),
            ("brick", 0.0),
        ];
        for ((name, v), (en, ev)) in names(&g, &t).into_iter().zip(expected) {
            assert_eq!(name, en);
            assert_eq!(v, ev, "{name}");
        }
    }

    #[test]
    fn g4_depth_one() {
        let g = g4();
        let t = base_empowerment(&g, EmpowermentParams { depth: 1, discount: 0.5, ..Default::default() });
        let v = |n: &str| t.value(g.id_of(n).unwrap());
        assert_eq!(v("water"), 2.5);
        assert_eq!(v("earth"), 2.5);
        assert_eq!(v("fire"), 2.0);
        assert_eq!(v("mud"), 1.0);
    }

    #[test]
    fn zero_discount_collapses_to_counts() {
        let g = crate::synthetic::random_graph(20, 40, 5);
        let base = base_empowerment(&g, EmpowermentParams { depth: 0, ..Default::default() });
        let deep = base_empowerment(&g, EmpowermentParams { depth: 3, discount: 0.0, ..Default::default() });
        assert_eq!(base.values(), deep.values());
    }

    #[test]
    fn combination_values_on_g4() {
        let g = g4();
        let t = base_empowerment(&g, EmpowermentParams { depth: 1, discount: 0.5, ..Default::default() });
        let p = |a: &str, b: &str| CanonicalPair::new(g.id_of(a).unwrap(), g.id_of(b).unwrap());
        assert_eq!(combination_empowerment(&t, &g, p("water", "earth")).unwrap(), 1.0);
        assert_eq!(combination_empowerment(&t, &g, p("water", "water")).unwrap(), 0.0);
        assert_eq!(combination_empowerment(&t, &g, p("water", "fire")).unwrap(), 0.0);
        let bad = CanonicalPair { lo: ElementId(0), hi: ElementId(99) };
        assert!(combination_empowerment(&t, &g, bad).is_err());
    }

    #[test]
    fn dynamic_updates() {
        let g = Arc::new(g4());
        let params = EmpowermentParams { depth: 1, discount: 0.5, increase_factor: 1.05, decrease_factor: 0.95 };
        let table = base_empowerment(&g, params);
        let water = g.id_of("water").unwrap();
        let mut s = crate::engine::SessionState::new(g.clone(), 0, SessionConfig::default());

        let hit = s.apply_combination("water", "fire").unwrap();
        let up = update_empowerment(&table, &hit);
        assert!((up.value(water) - 2.625).abs() < 1e-12);

        let miss = s.apply_combination("water", "air").unwrap();
        assert_eq!(miss.category, BehaviorCategory::FailureNew);
        let down = update_empowerment(&table, &miss);
        assert!((down.value(water) - 2.375).abs() < 1e-12);

        let repeat = s.apply_combination("water", "fire").unwrap();
        assert_eq!(repeat.category, BehaviorCategory::SuccessExisting);
        assert_eq!(update_empowerment(&table, &repeat), table);

        let invalid = s.apply_combination("water", "brick").unwrap();
        assert_eq!(update_empowerment(&table, &invalid), table);
    }

    #[test]
    fn uncertainty_values() {
        assert_eq!(uncertainty(0, 0), 0.0);
        assert_eq!(uncertainty(1, 5), 0.0);
        assert!((uncertainty(100, 0) - 2.145966026289347).abs() < 1e-12);
        assert!((uncertainty(100, 99) - 0.2145966026289347).abs() < 1e-12);
    }

    #[test]
    fn csv_export() {
        let g = g4();
        let t = base_empowerment(&g, EmpowermentParams { depth: 0, ..Default::default() });
        let mut buf = Vec::new();
        t.write_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("element,name,value\n0,water,2\n"));
        assert_eq!(text.lines().count(), 9);
    }
}
