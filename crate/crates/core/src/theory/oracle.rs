//! Reference solvers that share no code with the DP engine.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::WeightedDigraph;

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Binary-heap Dijkstra; requires non-negative weights. `None` marks
/// unreachable nodes.
pub fn dijkstra(g: &WeightedDigraph, source: usize) -> Vec<Option<f64>> {
    let mut adj = vec![Vec::new(); g.n];
    for &(u, v, w) in &g.edges {
        adj[u].push((v, w));
    }
    let mut dist: Vec<Option<f64>> = vec![None; g.n];
    let mut done = vec![false; g.n];
    let mut heap = BinaryHeap::new();
    dist[source] = Some(0.0);
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if dist[v].is_none_or(|cur| nd < cur) {
                dist[v] = Some(nd);
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

/// Minimum over all simple paths from `source`, by depth-first enumeration.
pub fn brute_force_shortest(g: &WeightedDigraph, source: usize) -> Vec<Option<f64>> {
    fn walk(
        g: &WeightedDigraph,
        u: usize,
        d: f64,
        on_path: &mut Vec<bool>,
        best: &mut Vec<Option<f64>>,
    ) {
        if best[u].is_none_or(|b| d < b) {
            best[u] = Some(d);
        }
        for &(a, b, w) in &g.edges {
            if a == u && !on_path[b] {
                on_path[b] = true;
                walk(g, b, d + w, on_path, best);
                on_path[b] = false;
            }
        }
    }
    let mut best = vec![None; g.n];
    let mut on_path = vec![false; g.n];
    on_path[source] = true;
    walk(g, source, 0.0, &mut on_path, &mut best);
    best
}

/// Longest strictly increasing subsequence by checking every subset.
pub fn exhaustive_lis(a: &[f64]) -> usize {
    assert!(a.len() < 25, "exhaustive search over 2^{} subsets", a.len());
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let picked: Vec<f64> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if picked.windows(2).all(|w| w[0] < w[1]) {
            best = best.max(picked.len());
        }
    }
    best
}

/// Shortest closed tour starting at city 0, by trying every ordering of the
/// remaining cities.
pub fn brute_force_tsp(dist: &[Vec<f64>]) -> f64 {
    let n = dist.len();
    if n <= 1 {
        return 0.0;
    }
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut rest, 0, &mut |order| {
        let mut cost = dist[0][order[0]];
        for w in order.windows(2) {
            cost += dist[w[0]][w[1]];
        }
        cost += dist[order[order.len() - 1]][0];
        best = best.min(cost);
    });
    best
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}
