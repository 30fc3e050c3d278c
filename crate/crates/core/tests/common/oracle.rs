//! Brute-force recomputations straight from the graph file, sharing no code
//! with the library's indexed implementations.

use std::collections::HashMap;

use craftbench::recipes::GraphFile;

fn involves(a: u32, b: u32, e: u32) -> bool {
    a == e || b == e
}

fn same_pair(r: (u32, u32), x: u32, y: u32) -> bool {
    (r.0 == x && r.1 == y) || (r.0 == y && r.1 == x)
}

/// Successful pairs and total unordered pairs (with repetition) over the
/// distinct members of `inventory`.
pub fn success_count(file: &GraphFile, inventory: &[u32]) -> (u64, u64) {
    let mut inv: Vec<u32> = inventory.to_vec();
    inv.sort();
    inv.dedup();
    let mut ok = 0;
    let mut total = 0;
    for i in 0..inv.len() {
        for j in i..inv.len() {
            total += 1;
            if file.recipes.iter().any(|r| same_pair((r.a, r.b), inv[i], inv[j])) {
                ok += 1;
            }
        }
    }
    (ok, total)
}

/// Depth-limited empowerment by memoized recursion over the recipe list.
pub fn empowerment(file: &GraphFile, depth: u32, discount: f64) -> Vec<f64> {
    fn value(file: &GraphFile, k: u32, e: u32, discount: f64, memo: &mut HashMap<(u32, u32), f64>) -> f64 {
        if let Some(v) = memo.get(&(k, e)) {
            return *v;
        }
        let mut total = 0.0;
        for r in file.recipes.iter().filter(|r| involves(r.a, r.b, e)) {
            total += if k == 0 {
                1.0
            } else {
                let mut sum = 0.0;
                for res in &r.results {
                    sum += value(file, k - 1, *res, discount, memo);
                }
                1.0 + discount * sum / r.results.len() as f64
            };
        }
        memo.insert((k, e), total);
        total
    }
    let mut memo = HashMap::new();
    file.elements.iter().map(|el| value(file, depth, el.id, discount, &mut memo)).collect()
}

/// Mean oracle value over the pair's results, 0 when it is no recipe.
pub fn combination(file: &GraphFile, values: &[f64], a: u32, b: u32) -> f64 {
    match file.recipes.iter().find(|r| same_pair((r.a, r.b), a, b)) {
        Some(r) => r.results.iter().map(|x| values[*x as usize]).sum::<f64>() / r.results.len() as f64,
        None => 0.0,
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
