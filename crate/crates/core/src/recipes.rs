//! The game universe: elements, recipes and difficulty properties of the
//! combinatorial space.
//!
//! A [`RecipeGraph`] maps unordered element pairs (self-pairs included) to
//! the elements they produce. Graphs are immutable once built and can be
//! shared freely between sessions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexSet;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Names of the four elements every play-through starts with.
pub const INITIAL_ELEMENTS: [&str; 4] = ["water", "fire", "earth", "air"];

/// Dense element index, `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub u32);

impl ElementId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Element {
    pub id: ElementId,
    pub name: String,
    pub is_initial: bool,
    pub category: Option<String>,
}

/// Unordered pair of elements stored as `(lo, hi)` with `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanonicalPair {
    pub lo: ElementId,
    pub hi: ElementId,
}

impl CanonicalPair {
    /// Builds the canonical form without validating the ids.
    pub fn new(a: ElementId, b: ElementId) -> Self {
        if a <= b {
            CanonicalPair { lo: a, hi: b }
        } else {
            CanonicalPair { lo: b, hi: a }
        }
    }

    pub fn is_self_pair(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, e: ElementId) -> bool {
        self.lo == e || self.hi == e
    }

    /// The element paired with `e`, if `e` is part of the pair.
    pub fn partner(&self, e: ElementId) -> Option<ElementId> {
        if self.lo == e {
            Some(self.hi)
        } else if self.hi == e {
            Some(self.lo)
        } else {
            None
        }
    }

    /// Distinct members: one element for a self-pair, two otherwise.
    pub fn members(&self) -> impl Iterator<Item = ElementId> {
        let second = if self.is_self_pair() { None } else { Some(self.hi) };
        std::iter::once(self.lo).chain(second)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub pair: CanonicalPair,
    pub results: Vec<ElementId>,
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("failed to read recipe graph: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed recipe graph: {0}")]
    Parse(String),
    #[error("invalid recipe graph: {0}")]
    Validation(String),
    #[error("unknown element {0}")]
    UnknownElement(String),
    #[error("inventory is empty")]
    EmptyInventory,
}

/// On-disk layout of a recipe graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub elements: Vec<ElementEntry>,
    pub recipes: Vec<RecipeEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementEntry {
    pub id: u32,
    pub name: String,
    pub initial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeEntry {
    pub a: u32,
    pub b: u32,
    pub results: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RecipeGraph {
    elements: Vec<Element>,
    recipes: BTreeMap<CanonicalPair, Recipe>,
    by_element: Vec<Vec<CanonicalPair>>,
    by_name: HashMap<String, ElementId>,
    content_hash: String,
}

impl RecipeGraph {
    /// Validates and indexes a graph description.
    pub fn from_file_repr(file: GraphFile) -> Result<Self, RecipeError> {
        let n = file.elements.len();
        if n == 0 {
            return Err(RecipeError::Validation("graph has no elements".into()));
        }
        let mut slots: Vec<Option<Element>> = vec![None; n];
        let mut by_name = HashMap::with_capacity(n);
        for entry in file.elements {
            let idx = entry.id as usize;
            if idx >= n {
                return Err(RecipeError::Validation(format!(
                    "element id {} outside dense range 0..{}",
                    entry.id, n
                )));
            }
            if slots[idx].is_some() {
                return Err(RecipeError::Validation(format!("duplicate element id {}", entry.id)));
            }
            let name = normalize_name(&entry.name);
            if name.is_empty() {
                return Err(RecipeError::Validation(format!("element {} has an empty name", entry.id)));
            }
            if by_name.insert(name.clone(), ElementId(entry.id)).is_some() {
                return Err(RecipeError::Validation(format!("duplicate element name {name:?}")));
            }
            slots[idx] = Some(Element {
                id: ElementId(entry.id),
                name,
                is_initial: entry.initial,
                category: entry.category,
            });
        }
        // every slot is filled: n distinct ids in 0..n
        let elements: Vec<Element> = slots.into_iter().map(|e| e.expect("dense ids")).collect();
        let initial = elements.iter().filter(|e| e.is_initial).count();
        if initial != INITIAL_ELEMENTS.len() {
            return Err(RecipeError::Validation(format!(
                "expected {} initial elements, found {initial}",
                INITIAL_ELEMENTS.len()
            )));
        }

        let check = |id: u32, what: &str| -> Result<ElementId, RecipeError> {
            if (id as usize) < n {
                Ok(ElementId(id))
            } else {
                Err(RecipeError::Validation(format!("{what} references unknown element id {id}")))
            }
        };
        let mut recipes: BTreeMap<CanonicalPair, Recipe> = BTreeMap::new();
        for entry in file.recipes {
            let pair = CanonicalPair::new(check(entry.a, "recipe")?, check(entry.b, "recipe")?);
            if entry.results.is_empty() {
                return Err(RecipeError::Validation(format!(
                    "recipe ({}, {}) has no results",
                    entry.a, entry.b
                )));
            }
            let recipe = recipes.entry(pair).or_insert_with(|| Recipe { pair, results: Vec::new() });
            for r in entry.results {
                let r = check(r, "recipe result")?;
                if !recipe.results.contains(&r) {
                    recipe.results.push(r);
                }
            }
        }

        let mut by_element = vec![Vec::new(); n];
        for pair in recipes.keys() {
            for m in pair.members() {
                by_element[m.index()].push(*pair);
            }
        }
        let content_hash = hash_graph(&elements, &recipes);
        Ok(RecipeGraph { elements, recipes, by_element, by_name, content_hash })
    }

    pub fn from_json_str(text: &str) -> Result<Self, RecipeError> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| RecipeError::Parse(e.to_string()))?;
        Self::from_file_repr(file)
    }

    /// The serializable representation, recipes in canonical order.
    pub fn to_file_repr(&self) -> GraphFile {
        GraphFile {
            elements: self
                .elements
                .iter()
                .map(|e| ElementEntry {
                    id: e.id.0,
                    name: e.name.clone(),
                    initial: e.is_initial,
                    category: e.category.clone(),
                })
                .collect(),
            recipes: self
                .recipes
                .values()
                .map(|r| RecipeEntry {
                    a: r.pair.lo.0,
                    b: r.pair.hi.0,
                    results: r.results.iter().map(|e| e.0).collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_repr()).expect("graph serializes")
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn recipe_count(&self) -> usize {
        self.recipes.len()
    }

    pub fn recipes(&self) -> impl Iterator<Item = &Recipe> {
        self.recipes.values()
    }

    pub fn element(&self, id: ElementId) -> Option<&Element> {
        self.elements.get(id.index())
    }

    pub fn name(&self, id: ElementId) -> &str {
        &self.elements[id.index()].name
    }

    pub fn contains(&self, id: ElementId) -> bool {
        id.index() < self.elements.len()
    }

    pub fn id_of(&self, name: &str) -> Option<ElementId> {
        self.by_name.get(&normalize_name(name)).copied()
    }

    /// The four starting elements in id order.
    pub fn initial_elements(&self) -> Vec<ElementId> {
        self.elements.iter().filter(|e| e.is_initial).map(|e| e.id).collect()
    }

    pub fn lookup(&self, pair: CanonicalPair) -> Option<&Recipe> {
        self.recipes.get(&pair)
    }

    /// Recipes whose pair contains `e`, in canonical pair order.
    pub fn recipes_with(&self, e: ElementId) -> impl Iterator<Item = &Recipe> {
        self.by_element
            .get(e.index())
            .into_iter()
            .flatten()
            .map(move |p| &self.recipes[p])
    }

    pub fn recipe_count_with(&self, e: ElementId) -> usize {
        self.by_element.get(e.index()).map_or(0, Vec::len)
    }

    /// SHA-256 over the canonical serialization; identifies the graph in logs.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn canonical_pair(&self, a: ElementId, b: ElementId) -> Result<CanonicalPair, RecipeError> {
        for id in [a, b] {
            if !self.contains(id) {
                return Err(RecipeError::UnknownElement(id.to_string()));
            }
        }
        Ok(CanonicalPair::new(a, b))
    }

    /// Number of distinct elements produced by recipes involving `e`.
    pub fn one_step_result_count(&self, e: ElementId) -> Result<usize, RecipeError> {
        if !self.contains(e) {
            return Err(RecipeError::UnknownElement(e.to_string()));
        }
        let distinct: BTreeSet<ElementId> =
            self.recipes_with(e).flat_map(|r| r.results.iter().copied()).collect();
        Ok(distinct.len())
    }

    /// Success probability of a uniformly chosen pair over `inventory`.
    pub fn success_probability(&self, inventory: &[ElementId]) -> Result<SuccessProbability, RecipeError> {
        let set: IndexSet<ElementId> = inventory.iter().copied().collect();
        if set.is_empty() {
            return Err(RecipeError::EmptyInventory);
        }
        if let Some(bad) = set.iter().find(|e| !self.contains(**e)) {
            return Err(RecipeError::UnknownElement(bad.to_string()));
        }
        let mut member = vec![false; self.len()];
        for e in &set {
            member[e.index()] = true;
        }
        // Walk each member's recipe list; a pair is counted from its `lo` side only.
        let successes = set
            .iter()
            .flat_map(|e| self.by_element[e.index()].iter().filter(move |p| p.lo == *e))
            .filter(|p| member[p.hi.index()])
            .count() as u64;
        Ok(SuccessProbability::new(successes, set.len() as u64))
    }
}

/// `P_s = S / C_n` for an inventory of size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessProbability {
    pub successes: u64,
    pub combinations: u64,
    pub probability: f64,
}

impl SuccessProbability {
    pub fn new(successes: u64, inventory_size: u64) -> Self {
        let combinations = pair_count(inventory_size);
        let probability =
            if combinations == 0 { 0.0 } else { successes as f64 / combinations as f64 };
        SuccessProbability { successes, combinations, probability }
    }
}

/// Number of unordered pairs with repetition over `n` items, `n(n+1)/2`.
pub fn pair_count(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Maps an index in `0..n(n+1)/2` to the pair `(i, j)`, `i <= j`, in
/// row-major order over the upper triangle.
pub fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - i;
        if k < row {
            return (i, i + k);
        }
        k -= row;
    }
    panic!("pair index out of range for {n} items");
}

/// Draws one pair uniformly among all `C_n` unordered pairs (with
/// repetition) over `items`.
pub fn sample_uniform_pair<R: Rng + ?Sized>(items: &[ElementId], rng: &mut R) -> CanonicalPair {
    assert!(!items.is_empty(), "cannot sample a pair from an empty inventory");
    let n = items.len();
    let k = rng.random_range(0..pair_count(n as u64) as usize);
    let (i, j) = unrank_pair(k, n);
    CanonicalPair::new(items[i], items[j])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyPoint {
    pub inventory_size: usize,
    pub mean_success_probability: f64,
    /// Number of seeds whose simulation reached this size.
    pub samples: usize,
}

/// Mean success probability by inventory size under a uniformly random
/// policy. Each seed contributes the value observed when its inventory first
/// reaches a size; the seed list is treated as a set.
pub fn difficulty_curve(graph: &RecipeGraph, seeds: &[u64], max_trials: usize) -> Vec<DifficultyPoint> {
    let seeds: BTreeSet<u64> = seeds.iter().copied().collect();
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for seed in seeds {
        for (size, p) in simulate_random_difficulty(graph, seed, max_trials) {
            let slot = acc.entry(size).or_insert((0.0, 0));
            slot.0 += p;
            slot.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(inventory_size, (sum, samples))| DifficultyPoint {
            inventory_size,
            mean_success_probability: sum / samples as f64,
            samples,
        })
        .collect()
}

fn simulate_random_difficulty(graph: &RecipeGraph, seed: u64, max_trials: usize) -> Vec<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inventory: IndexSet<ElementId> = graph.initial_elements().into_iter().collect();
    let mut items: Vec<ElementId> = inventory.iter().copied().collect();
    let mut points = Vec::new();
    let record = |items: &[ElementId], points: &mut Vec<(usize, f64)>| {
        let p = graph.success_probability(items).expect("inventory ids are valid");
        points.push((items.len(), p.probability));
    };
    record(&items, &mut points);
    for _ in 0..max_trials {
        let pair = sample_uniform_pair(&items, &mut rng);
        if let Some(recipe) = graph.lookup(pair) {
            let before = inventory.len();
            inventory.extend(recipe.results.iter().copied());
            if inventory.len() > before {
                items = inventory.iter().copied().collect();
                record(&items, &mut points);
            }
        }
    }
    points
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<RecipeGraph, RecipeError> {
    let text = fs::read_to_string(path)?;
    RecipeGraph::from_json_str(&text)
}

pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

fn hash_graph(elements: &[Element], recipes: &BTreeMap<CanonicalPair, Recipe>) -> String {
    let mut hasher = Sha256::new();
    for e in elements {
        hasher.update(e.id.0.to_le_bytes());
        hasher.update(e.name.as_bytes());
        hasher.update([0u8, e.is_initial as u8]);
    }
    for r in recipes.values() {
        hasher.update(r.pair.lo.0.to_le_bytes());
        hasher.update(r.pair.hi.0.to_le_bytes());
        let mut results = r.results.clone();
        results.sort();
        for x in results {
            hasher.update(x.0.to_le_bytes());
        }
        hasher.update([0xff]);
    }
    hex::encode(hasher.finalize())
}
