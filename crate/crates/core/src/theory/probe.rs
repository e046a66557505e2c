//! Asks an LLM the same shortest-path question before and after relabeling
//! the nodes, maps the relabeled answer back, and counts agreements.

use serde::{Deserialize, Serialize};

use super::oracle::dijkstra;
use super::{check_permutation, TheoryError, WeightedDigraph};
use crate::llm::LlmClient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeProblem {
    pub graph: WeightedDigraph,
    pub source: usize,
    pub target: usize,
}

impl ProbeProblem {
    pub fn prompt(&self) -> String {
        let mut s = String::from(
            "In a directed graph, (i,j,w) means there is an edge from node i to node j with weight w.\n",
        );
        s.push_str(&format!("The nodes are numbered from 0 to {}, and the edges are:", self.graph.n.saturating_sub(1)));
        for &(u, v, w) in &self.graph.edges {
            s.push_str(&format!(" ({u},{v},{w})"));
        }
        s.push_str(&format!(
            "\nGive the shortest path from node {} to node {}. Answer with the node sequence only, separated by spaces.",
            self.source, self.target
        ));
        s
    }

    pub fn relabel(&self, perm: &[usize]) -> Result<Self, TheoryError> {
        Ok(Self {
            graph: self.graph.relabel(perm)?,
            source: perm[self.source],
            target: perm[self.target],
        })
    }

    pub fn optimal_cost(&self) -> Option<f64> {
        dijkstra(&self.graph, self.source)[self.target]
    }

    /// Cost of `path` if it is a walk from source to target along edges.
    pub fn path_cost(&self, path: &[usize]) -> Option<f64> {
        if path.first() != Some(&self.source) || path.last() != Some(&self.target) {
            return None;
        }
        path.windows(2).try_fold(0.0, |acc, w| {
            self.graph
                .edges
                .iter()
                .filter(|(u, v, _)| *u == w[0] && *v == w[1])
                .map(|e| e.2)
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))))
                .map(|c| acc + c)
        })
    }
}

/// Every integer in the response, in order.
pub fn parse_node_sequence(response: &str) -> Vec<usize> {
    response
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub problem: usize,
    pub permutation: Vec<usize>,
    pub original_answer: Vec<usize>,
    /// Relabeled answer mapped back to the original node ids.
    pub permuted_answer: Vec<usize>,
    pub agree: bool,
    pub original_correct: bool,
    pub permuted_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trials: usize,
    pub agreements: usize,
    pub agreement_rate: f64,
    pub original_accuracy: f64,
    pub permuted_accuracy: f64,
    pub llm_calls: usize,
    pub outcomes: Vec<ProbeOutcome>,
}

fn is_optimal(p: &ProbeProblem, answer: &[usize]) -> bool {
    match (p.path_cost(answer), p.optimal_cost()) {
        (Some(c), Some(best)) => (c - best).abs() <= 1e-9 * best.abs().max(1.0),
        _ => false,
    }
}

/// Queries each problem once as given and once per permutation. An identity
/// permutation yields the same prompt, so the original answer is reused.
pub fn permutation_probe(
    problems: &[ProbeProblem],
    permutations: &[Vec<usize>],
    client: &LlmClient,
) -> Result<ProbeReport, TheoryError> {
    if problems.is_empty() || permutations.is_empty() {
        return Err(TheoryError::EmptyProbe);
    }
    let mut outcomes = Vec::new();
    let mut llm_calls = 0;
    for (pi, problem) in problems.iter().enumerate() {
        let original = parse_node_sequence(&client.chat(&problem.prompt())?.response);
        llm_calls += 1;
        let original_correct = is_optimal(problem, &original);
        for perm in permutations {
            check_permutation(perm, problem.graph.n)?;
            let permuted_answer = if perm.iter().enumerate().all(|(i, &p)| i == p) {
                original.clone()
            } else {
                let relabeled = problem.relabel(perm)?;
                llm_calls += 1;
                let answer = parse_node_sequence(&client.chat(&relabeled.prompt())?.response);
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                // Out-of-range ids cannot be mapped back; keep them as is so
                // the answer still disagrees.
                answer.into_iter().map(|x| inverse.get(x).copied().unwrap_or(usize::MAX)).collect()
            };
            outcomes.push(ProbeOutcome {
                problem: pi,
                permutation: perm.clone(),
                agree: permuted_answer == original,
                permuted_correct: is_optimal(problem, &permuted_answer),
                original_correct,
                original_answer: original.clone(),
                permuted_answer,
            });
        }
    }
    let trials = outcomes.len();
    let count = |f: fn(&ProbeOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let agreements = count(|o| o.agree);
    let rate = |k: usize| k as f64 / trials as f64;
    Ok(ProbeReport {
        trials,
        agreements,
        agreement_rate: rate(agreements),
        original_accuracy: rate(count(|o| o.original_correct)),
        permuted_accuracy: rate(count(|o| o.permuted_correct)),
        llm_calls,
        outcomes,
    })
}
