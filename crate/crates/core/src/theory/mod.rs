//! Dynamic programs over edge lists, next-token training on paths, and a
//! relabeling probe for LLM graph answers.
//!
//! The DP engine iterates
//! `Answer[k][i] = f(agg_{j in T(i)} g(Answer[k-1][j], c[i][j]))`
//! with `f`, `g` and the aggregator drawn from a small named catalog so that
//! instances serialize to JSON and to the flat token layout
//! `u v c ... u Answer[0][u] ...`.

pub mod logits;
pub mod oracle;
pub mod probe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use logits::{fit_tabular, frequency_logits, LogitRow, PathDataset, RowStatus, TabularLogitModel};
pub use probe::{permutation_probe, ProbeOutcome, ProbeProblem, ProbeReport};

/// Stand-in for an unreachable distance; finite so that `g` stays total.
pub const UNREACHABLE: f64 = 1e18;

/// Largest city count accepted by [`tsp_solve`].
pub const TSP_MAX_CITIES: usize = 15;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("non-finite value at state {state} in iteration {iteration}")]
    NonFiniteValue { iteration: usize, state: usize },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("token stream: {0}")]
    Tokens(String),
    #[error("invalid path dataset: {0}")]
    InvalidDataset(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("probe needs at least one problem and one permutation")]
    EmptyProbe,
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Min,
    Max,
    Sum,
    Mean,
}

impl Aggregator {
    fn apply(self, values: impl Iterator<Item = f64>) -> Option<f64> {
        let mut count = 0usize;
        let mut acc = 0.0;
        for v in values {
            acc = if count == 0 {
                v
            } else {
                match self {
                    Aggregator::Min => acc.min(v),
                    Aggregator::Max => acc.max(v),
                    Aggregator::Sum | Aggregator::Mean => acc + v,
                }
            };
            count += 1;
        }
        match (count, self) {
            (0, _) => None,
            (n, Aggregator::Mean) => Some(acc / n as f64),
            _ => Some(acc),
        }
    }
}

/// Combines a predecessor's value with the transition cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryFn {
    Add,
    MinPair,
    MaxPair,
}

impl BinaryFn {
    pub fn apply(self, value: f64, cost: f64) -> f64 {
        match self {
            BinaryFn::Add => value + cost,
            BinaryFn::MinPair => value.min(cost),
            BinaryFn::MaxPair => value.max(cost),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryFn {
    Identity,
}

impl UnaryFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryFn::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpInstance {
    /// `transitions[i]` lists `T(i)` with costs `c[i][j]`.
    pub transitions: Vec<Vec<Transition>>,
    pub init: Vec<f64>,
    pub aggregator: Aggregator,
    pub g: BinaryFn,
    pub f: UnaryFn,
}

impl DpInstance {
    pub fn new(
        transitions: Vec<Vec<Transition>>,
        init: Vec<f64>,
        aggregator: Aggregator,
        g: BinaryFn,
        f: UnaryFn,
    ) -> Result<Self, TheoryError> {
        let inst = Self { transitions, init, aggregator, g, f };
        inst.validate()?;
        Ok(inst)
    }

    pub fn n(&self) -> usize {
        self.init.len()
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let n = self.init.len();
        if self.transitions.len() != n {
            return Err(TheoryError::InvalidInstance(format!(
                "{} transition lists for {} states",
                self.transitions.len(),
                n
            )));
        }
        for (i, ts) in self.transitions.iter().enumerate() {
            for t in ts {
                if t.from >= n {
                    return Err(TheoryError::InvalidInstance(format!(
                        "state {i} reads from missing state {}",
                        t.from
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn edge_count(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }

    pub fn from_json_str(s: &str) -> Result<Self, TheoryError> {
        let inst: Self =
            serde_json::from_str(s).map_err(|e| TheoryError::InvalidInstance(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }
}

/// Runs `k` synchronous updates. States with an empty `T(i)` keep their value.
pub fn dp_run(inst: &DpInstance, k: usize) -> Result<Vec<f64>, TheoryError> {
    inst.validate()?;
    let check = |values: &[f64], iteration: usize| {
        match values.iter().position(|v| !v.is_finite()) {
            Some(state) => Err(TheoryError::NonFiniteValue { iteration, state }),
            None => Ok(()),
        }
    };
    let mut cur = inst.init.clone();
    check(&cur, 0)?;
    for iteration in 1..=k {
        let next: Vec<f64> = inst
            .transitions
            .iter()
            .enumerate()
            .map(|(i, ts)| {
                inst.aggregator
                    .apply(ts.iter().map(|t| inst.g.apply(cur[t.from], t.cost)))
                    .map_or(cur[i], |a| inst.f.apply(a))
            })
            .collect();
        check(&next, iteration)?;
        if next == cur {
            // A fixed point stays fixed; the remaining iterations are no-ops.
            return Ok(next);
        }
        cur = next;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDigraph {
    pub n: usize,
    /// `(from, to, weight)`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl WeightedDigraph {
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self, TheoryError> {
        if let Some(&(u, v, _)) = edges.iter().find(|(u, v, _)| *u >= n || *v >= n) {
            return Err(TheoryError::InvalidInstance(format!(
                "edge {u}->{v} outside {n} nodes"
            )));
        }
        Ok(Self { n, edges })
    }

    /// Node `i` becomes `perm[i]`; edges are listed sorted by new endpoints.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self, TheoryError> {
        check_permutation(perm, self.n)?;
        let mut edges: Vec<_> = self.edges.iter().map(|&(u, v, w)| (perm[u], perm[v], w)).collect();
        edges.sort_by_key(|e| (e.0, e.1));
        Ok(Self { n: self.n, edges })
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<(), TheoryError> {
    if perm.len() != n {
        return Err(TheoryError::InvalidPermutation(format!(
            "length {} for {n} nodes",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(TheoryError::InvalidPermutation(format!("{perm:?}")));
        }
    }
    Ok(())
}

/// Single-source shortest paths: `T(i)` holds the in-neighbors of `i` plus a
/// zero-cost self transition, `g = add`, aggregation by `min`. Running
/// `n - 1` iterations gives exact distances; unreachable nodes stay at
/// [`UNREACHABLE`].
pub fn make_bellman_ford(graph: &WeightedDigraph, source: usize) -> Result<DpInstance, TheoryError> {
    if source >= graph.n {
        return Err(TheoryError::InvalidInstance(format!(
            "source {source} outside {} nodes",
            graph.n
        )));
    }
    let mut transitions: Vec<Vec<Transition>> =
        (0..graph.n).map(|i| vec![Transition { from: i, cost: 0.0 }]).collect();
    for &(u, v, w) in &graph.edges {
        transitions[v].push(Transition { from: u, cost: w });
    }
    let mut init = vec![UNREACHABLE; graph.n];
    init[source] = 0.0;
    DpInstance::new(transitions, init, Aggregator::Min, BinaryFn::Add, UnaryFn::Identity)
}

/// Longest strictly increasing subsequence ending at each index:
/// `T(i) = {i} ∪ {j < i : a[j] < a[i]}` with cost 0 for `i` itself and 1
/// otherwise, `g = add`, aggregation by `max`, all states start at 1.
/// After `n - 1` iterations the maximum state value is the LIS length.
pub fn make_lis(array: &[f64]) -> Result<DpInstance, TheoryError> {
    let transitions = (0..array.len())
        .map(|i| {
            std::iter::once(Transition { from: i, cost: 0.0 })
                .chain((0..i).filter(|&j| array[j] < array[i]).map(|j| Transition { from: j, cost: 1.0 }))
                .collect()
        })
        .collect();
    DpInstance::new(transitions, vec![1.0; array.len()], Aggregator::Max, BinaryFn::Add, UnaryFn::Identity)
}

pub fn lis_length(array: &[f64]) -> Result<usize, TheoryError> {
    if array.is_empty() {
        return Ok(0);
    }
    let inst = make_lis(array)?;
    let ans = dp_run(&inst, array.len() - 1)?;
    Ok(ans.iter().cloned().fold(0.0, f64::max) as usize)
}

/// Optimal closed tour cost by Held-Karp over (subset, last city) states.
pub fn tsp_solve(dist: &[Vec<f64>]) -> Result<f64, TheoryError> {
    let n = dist.len();
    if n == 0 {
        return Err(TheoryError::InvalidInstance("no cities".into()));
    }
    if n > TSP_MAX_CITIES {
        return Err(TheoryError::InvalidInstance(format!(
            "{n} cities exceeds the limit of {TSP_MAX_CITIES}"
        )));
    }
    if dist.iter().any(|row| row.len() != n) {
        return Err(TheoryError::InvalidInstance("distance matrix is not square".into()));
    }
    if n == 1 {
        return Ok(0.0);
    }
    // City 0 is the fixed start; subsets range over cities 1..n.
    let m = n - 1;
    let full = 1usize << m;
    let mut best = vec![f64::INFINITY; full * m];
    for i in 0..m {
        best[(1 << i) * m + i] = dist[0][i + 1];
    }
    for set in 1..full {
        for last in 0..m {
            if set & (1 << last) == 0 {
                continue;
            }
            let cur = best[set * m + last];
            if !cur.is_finite() {
                continue;
            }
            for next in 0..m {
                if set & (1 << next) != 0 {
                    continue;
                }
                let to = (set | (1 << next)) * m + next;
                let cand = cur + dist[last + 1][next + 1];
                if cand < best[to] {
                    best[to] = cand;
                }
            }
        }
    }
    let cost = (0..m)
        .map(|last| best[(full - 1) * m + last] + dist[last + 1][0])
        .fold(f64::INFINITY, f64::min);
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(TheoryError::NonFiniteValue { iteration: m, state: 0 })
    }
}

fn fmt_value(x: f64) -> String {
    format!("{x:.6}")
}

/// Flattens an instance to `from to cost` triples (grouped by target state in
/// order) followed by `state Answer[0][state]` pairs.
pub fn serialize_edge_list(inst: &DpInstance) -> Vec<String> {
    let mut out = Vec::with_capacity(3 * inst.edge_count() + 2 * inst.n());
    for (i, ts) in inst.transitions.iter().enumerate() {
        for t in ts {
            out.push(t.from.to_string());
            out.push(i.to_string());
            out.push(fmt_value(t.cost));
        }
    }
    for (i, v) in inst.init.iter().enumerate() {
        out.push(i.to_string());
        out.push(fmt_value(*v));
    }
    out
}

/// Shape of an instance that the token layout does not carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpSignature {
    pub n: usize,
    pub aggregator: Aggregator,
    pub g: BinaryFn,
    pub f: UnaryFn,
}

impl DpSignature {
    pub fn of(inst: &DpInstance) -> Self {
        Self { n: inst.n(), aggregator: inst.aggregator, g: inst.g, f: inst.f }
    }
}

pub fn parse_edge_list<S: AsRef<str>>(tokens: &[S], sig: DpSignature) -> Result<DpInstance, TheoryError> {
    let n = sig.n;
    if tokens.len() < 2 * n || !(tokens.len() - 2 * n).is_multiple_of(3) {
        return Err(TheoryError::Tokens(format!(
            "{} tokens cannot hold {n} states plus whole edge triples",
            tokens.len()
        )));
    }
    let state = |s: &str| -> Result<usize, TheoryError> {
        let v: usize = s.parse().map_err(|_| TheoryError::Tokens(format!("bad state token {s:?}")))?;
        if v >= n {
            return Err(TheoryError::Tokens(format!("state {v} outside {n} states")));
        }
        Ok(v)
    };
    let value = |s: &str| -> Result<f64, TheoryError> {
        s.parse().map_err(|_| TheoryError::Tokens(format!("bad value token {s:?}")))
    };
    let split = tokens.len() - 2 * n;
    let mut transitions = vec![Vec::new(); n];
    for triple in tokens[..split].chunks(3) {
        let from = state(triple[0].as_ref())?;
        let to = state(triple[1].as_ref())?;
        transitions[to].push(Transition { from, cost: value(triple[2].as_ref())? });
    }
    let mut init = Vec::with_capacity(n);
    for (k, pair) in tokens[split..].chunks(2).enumerate() {
        if state(pair[0].as_ref())? != k {
            return Err(TheoryError::Tokens(format!(
                "initial state {k} listed as {:?}",
                pair[0].as_ref()
            )));
        }
        init.push(value(pair[1].as_ref())?);
    }
    DpInstance::new(transitions, init, sig.aggregator, sig.g, sig.f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> WeightedDigraph {
        WeightedDigraph::new(3, vec![(0, 1, 2.0), (1, 2, 3.0)]).unwrap()
    }

    #[test]
    fn zero_iterations_return_init() {
        let inst = make_bellman_ford(&chain(), 0).unwrap();
        assert_eq!(dp_run(&inst, 0).unwrap(), inst.init);
    }

    #[test]
    fn chain_shortest_paths() {
        let inst = make_bellman_ford(&chain(), 0).unwrap();
        assert_eq!(dp_run(&inst, 2).unwrap(), vec![0.0, 2.0, 5.0]);
    }

    #[test]
    fn raw_instance_with_empty_source_transitions() {
        // Source has no in-edges; it keeps its value.
        let t = |from, cost| Transition { from, cost };
        let inst = DpInstance::new(
            vec![vec![], vec![t(0, 2.0)], vec![t(1, 3.0)]],
            vec![0.0, UNREACHABLE, UNREACHABLE],
            Aggregator::Min,
            BinaryFn::Add,
            UnaryFn::Identity,
        )
        .unwrap();
        assert_eq!(dp_run(&inst, 2).unwrap(), vec![0.0, 2.0, 5.0]);
    }

    #[test]
    fn single_node_and_unreachable() {
        let g = WeightedDigraph::new(1, vec![]).unwrap();
        let inst = make_bellman_ford(&g, 0).unwrap();
        assert_eq!(inst.init, vec![0.0]);
        assert_eq!(dp_run(&inst, 0).unwrap(), vec![0.0]);
        let g = WeightedDigraph::new(2, vec![]).unwrap();
        let inst = make_bellman_ford(&g, 0).unwrap();
        assert_eq!(dp_run(&inst, 1).unwrap(), vec![0.0, UNREACHABLE]);
    }

    #[test]
    fn lis_examples() {
        assert_eq!(lis_length(&[1.0, 3.0, 2.0, 4.0]).unwrap(), 3);
        assert_eq!(lis_length(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 5);
        assert_eq!(lis_length(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), 1);
        assert_eq!(lis_length(&[]).unwrap(), 0);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let inst = DpInstance::new(
            vec![vec![Transition { from: 0, cost: f64::NAN }]],
            vec![0.0],
            Aggregator::Sum,
            BinaryFn::Add,
            UnaryFn::Identity,
        )
        .unwrap();
        assert!(matches!(dp_run(&inst, 1), Err(TheoryError::NonFiniteValue { iteration: 1, state: 0 })));
    }

    #[test]
    fn aggregators() {
        let vals = [3.0, 1.0, 2.0];
        assert_eq!(Aggregator::Min.apply(vals.iter().cloned()), Some(1.0));
        assert_eq!(Aggregator::Max.apply(vals.iter().cloned()), Some(3.0));
        assert_eq!(Aggregator::Sum.apply(vals.iter().cloned()), Some(6.0));
        assert_eq!(Aggregator::Mean.apply(vals.iter().cloned()), Some(2.0));
        assert_eq!(Aggregator::Mean.apply(std::iter::empty()), None);
    }

    #[test]
    fn invalid_transition_rejected() {
        let r = DpInstance::new(
            vec![vec![Transition { from: 3, cost: 0.0 }]],
            vec![0.0],
            Aggregator::Min,
            BinaryFn::Add,
            UnaryFn::Identity,
        );
        assert!(matches!(r, Err(TheoryError::InvalidInstance(_))));
    }

    #[test]
    fn tsp_small_cases() {
        let d = vec![vec![0.0, 7.0], vec![7.0, 0.0]];
        assert_eq!(tsp_solve(&d).unwrap(), 14.0);
        let d = vec![vec![0.0, 3.0, 5.0], vec![3.0, 0.0, 4.0], vec![5.0, 4.0, 0.0]];
        assert_eq!(tsp_solve(&d).unwrap(), 12.0);
        assert!(tsp_solve(&vec![vec![0.0; 16]; 16]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let empty = DpInstance::new(
            vec![vec![], vec![]],
            vec![0.0, 1.5],
            Aggregator::Min,
            BinaryFn::Add,
            UnaryFn::Identity,
        )
        .unwrap();
        assert_eq!(serialize_edge_list(&empty), vec!["0", "0.000000", "1", "1.500000"]);

        let one = DpInstance::new(
            vec![vec![], vec![Transition { from: 0, cost: 2.0 }]],
            vec![0.0, UNREACHABLE],
            Aggregator::Min,
            BinaryFn::Add,
            UnaryFn::Identity,
        )
        .unwrap();
        let toks = serialize_edge_list(&one);
        assert_eq!(toks.len(), 3 + 4);
        assert_eq!(&toks[..3], &["0", "1", "2.000000"]);
        assert_eq!(parse_edge_list(&toks, DpSignature::of(&one)).unwrap(), one);
    }

    #[test]
    fn json_round_trip() {
        let inst = make_lis(&[2.0, 1.0, 3.0]).unwrap();
        let json = inst.to_json_string();
        assert!(json.contains("\"max\"") && json.contains("\"add\""));
        assert_eq!(DpInstance::from_json_str(&json).unwrap(), inst);
    }
}
