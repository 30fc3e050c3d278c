//! Small recipe graphs used as fixtures and for simulation studies.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::recipes::{ElementEntry, GraphFile, RecipeEntry, RecipeGraph, INITIAL_ELEMENTS};

fn entry(id: u32, name: &str, initial: bool) -> ElementEntry {
    ElementEntry { id, name: name.to_string(), initial, category: None }
}

/// The eight-element micro-graph:
/// water+fire→steam, water+earth→mud, earth+air→dust, mud+fire→brick.
pub fn g4() -> RecipeGraph {
    RecipeGraph::from_file_repr(g4_file()).expect("g4 is valid")
}

pub fn g4_file() -> GraphFile {
    let names = ["water", "fire", "earth", "air", "steam", "mud", "dust", "brick"];
    let elements = names.iter().enumerate().map(|(i, n)| entry(i as u32, n, i < 4)).collect();
    let recipe = |a, b, r| RecipeEntry { a, b, results: vec![r] };
    GraphFile {
        elements,
        recipes: vec![recipe(0, 1, 4), recipe(0, 2, 5), recipe(2, 3, 6), recipe(5, 1, 7)],
    }
}

/// Only the four initial elements and no recipes.
pub fn initial_only() -> RecipeGraph {
    let elements = INITIAL_ELEMENTS.iter().enumerate().map(|(i, n)| entry(i as u32, n, true)).collect();
    RecipeGraph::from_file_repr(GraphFile { elements, recipes: vec![] }).expect("valid")
}

fn synthetic_name(k: u32) -> String {
    format!("el{k:03}")
}

/// G4 extended to `n` elements (`n >= 8`) with planted deep chains.
///
/// Every element past the G4 core is produced by exactly one recipe over
/// earlier elements. Roughly half of them are "chain" elements that later
/// serve as ingredients, half are dead ends that combine with nothing.
/// Parent selection favours the most recent chain element, which produces
/// long dependency chains.
pub fn planted_chain_graph(n: u32, seed: u64) -> RecipeGraph {
    RecipeGraph::from_file_repr(planted_chain_file(n, seed)).expect("planted graph is valid")
}

pub fn planted_chain_file(n: u32, seed: u64) -> GraphFile {
    assert!(n >= 8, "planted graph extends the 8-element core");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = g4_file();
    let mut used: std::collections::HashSet<(u32, u32)> =
        file.recipes.iter().map(|r| (r.a.min(r.b), r.a.max(r.b))).collect();
    // ingredients available for new recipes: initial elements plus mud
    let mut pool: Vec<u32> = vec![0, 1, 2, 3, 5];
    let mut last_chain = 5u32;
    for k in 8..n {
        file.elements.push(ElementEntry {
            id: k,
            name: synthetic_name(k),
            initial: false,
            category: None,
        });
        let mut pair = None;
        for _ in 0..64 {
            let a = if rng.random_bool(0.5) { last_chain } else { *pool.choose(&mut rng).unwrap() };
            let b = *pool.choose(&mut rng).unwrap();
            let key = (a.min(b), a.max(b));
            if used.insert(key) {
                pair = Some(key);
                break;
            }
        }
        let (a, b) = pair.expect("ingredient pool has free pairs");
        file.recipes.push(RecipeEntry { a, b, results: vec![k] });
        if rng.random_bool(0.5) {
            pool.push(k);
            last_chain = k;
        }
    }
    file
}

/// Uniformly random graph over `n` elements (4 initial + `n - 4` others)
/// with up to `recipes` recipes, each yielding one or two results.
pub fn random_graph(n: u32, recipes: usize, seed: u64) -> RecipeGraph {
    RecipeGraph::from_file_repr(random_graph_file(n, recipes, seed)).expect("random graph is valid")
}

pub fn random_graph_file(n: u32, recipes: usize, seed: u64) -> GraphFile {
    assert!(n >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elements = (0..n)
        .map(|k| {
            if (k as usize) < INITIAL_ELEMENTS.len() {
                entry(k, INITIAL_ELEMENTS[k as usize], true)
            } else {
                entry(k, &synthetic_name(k), false)
            }
        })
        .collect();
    let mut out = Vec::new();
    let mut used = std::collections::HashSet::new();
    let max_pairs = (n as usize) * (n as usize + 1) / 2;
    while out.len() < recipes.min(max_pairs) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if !used.insert((a.min(b), a.max(b))) {
            continue;
        }
        let first = rng.random_range(0..n);
        let mut results = vec![first];
        if rng.random_bool(0.3) {
            let second = rng.random_range(0..n);
            if second != first {
                results.push(second);
            }
        }
        out.push(RecipeEntry { a, b, results });
    }
    GraphFile { elements, recipes: out }
}
