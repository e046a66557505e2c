//! `theory` subcommand suites: DP oracle comparisons, the frequency-logit
//! fit and the permutation probe.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use taskplan_core::llm::MockResponder;
use taskplan_core::theory::oracle::{brute_force_tsp, dijkstra, exhaustive_lis};
use taskplan_core::theory::{
    dp_run, fit_tabular, frequency_logits, lis_length, make_bellman_ford, parse_edge_list, permutation_probe,
    serialize_edge_list, tsp_solve, DpSignature, LogitRow, PathDataset, ProbeProblem, ProbeReport, RowStatus,
    WeightedDigraph, UNREACHABLE,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::runtime::build_client;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Dp,
    Logits,
    Permute,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dp" => Ok(Suite::Dp),
            "logits" => Ok(Suite::Logits),
            "permute" => Ok(Suite::Permute),
            _ => Err(CliError::Config(format!("unknown theory suite {s:?}"))),
        }
    }
}

pub const LOGIT_TOLERANCE: f64 = 1e-3;
pub const FIT_STEPS: usize = 40_000;
pub const FIT_LR: f64 = 2.0;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub mismatches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DpReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitCase {
    pub sequences: usize,
    pub linf_gap: f64,
    pub unconstrained_rows: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogitsReport {
    pub seed: u64,
    pub tolerance: f64,
    pub example: FitCase,
    /// UNCONSTRAINED rows of the two-path example, flagged for inspection.
    pub example_unconstrained: Vec<LogitRow>,
    pub random: Vec<FitCase>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PermuteReport {
    pub seed: u64,
    pub nodes: usize,
    pub problems: Vec<ProbeProblem>,
    pub probe: ProbeReport,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "suite", rename_all = "lowercase")]
pub enum SuiteReport {
    Dp(DpReport),
    Logits(LogitsReport),
    Permute(PermuteReport),
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        match self {
            SuiteReport::Dp(r) => r.passed,
            SuiteReport::Logits(r) => r.passed,
            SuiteReport::Permute(_) => true,
        }
    }
}

fn random_digraph(rng: &mut ChaCha8Rng, n: usize, p: f64, weights: std::ops::Range<u32>) -> WeightedDigraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (0..n).filter(|&v| v != u) {
            if rng.random_bool(p) {
                edges.push((u, v, f64::from(rng.random_range(weights.clone())) / 100.0));
            }
        }
    }
    WeightedDigraph::new(n, edges).expect("valid digraph")
}

fn check(name: &str, cases: usize, mismatches: usize) -> Check {
    Check {
        name: name.into(),
        cases,
        mismatches,
    }
}

pub fn dp_suite(seed: u64) -> Result<DpReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let (mut bf_bad, mut ser_bad) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let g = random_digraph(&mut rng, n, 0.4, 0..2000);
        let s = rng.random_range(0..n);
        let inst = make_bellman_ford(&g, s)?;
        let dp = dp_run(&inst, n - 1)?;
        let reference: Vec<f64> = dijkstra(&g, s).into_iter().map(|d| d.unwrap_or(UNREACHABLE)).collect();
        bf_bad += usize::from(dp != reference);
        let back = parse_edge_list(&serialize_edge_list(&inst), DpSignature::of(&inst))?;
        ser_bad += usize::from(back != inst);
    }
    checks.push(check("bellman_ford_vs_dijkstra", 100, bf_bad));
    checks.push(check("edge_list_round_trip", 100, ser_bad));

    let mut lis_bad = 0;
    for _ in 0..100 {
        let len = rng.random_range(0..=10);
        let a: Vec<f64> = (0..len).map(|_| f64::from(rng.random_range(0u8..8))).collect();
        lis_bad += usize::from(lis_length(&a)? != exhaustive_lis(&a));
    }
    checks.push(check("lis_vs_exhaustive", 100, lis_bad));

    let mut tsp_bad = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..=7);
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { f64::from(rng.random_range(1u32..100)) }).collect())
            .collect();
        tsp_bad += usize::from(tsp_solve(&dist)? != brute_force_tsp(&dist));
    }
    checks.push(check("held_karp_vs_permutations", 20, tsp_bad));

    let passed = checks.iter().all(|c| c.mismatches == 0);
    Ok(DpReport { seed, checks, passed })
}

fn fit_case(d: &PathDataset) -> Result<FitCase, CliError> {
    let closed = frequency_logits(d);
    let fitted = fit_tabular(d, FIT_STEPS, FIT_LR)?;
    Ok(FitCase {
        sequences: d.sequences().len(),
        linf_gap: fitted.constrained_linf(&closed),
        unconstrained_rows: closed.unconstrained().count(),
        final_loss: fitted.final_loss,
    })
}

/// The two paths `a b c` and `b c d` with `a..d` numbered `0..3`.
pub fn example_dataset() -> PathDataset {
    PathDataset::from_paths(&[vec![0, 1, 2], vec![1, 2, 3]]).expect("valid example")
}

pub fn logits_suite(seed: u64) -> Result<LogitsReport, CliError> {
    let ex = example_dataset();
    let example = fit_case(&ex)?;
    let closed = frequency_logits(&ex);
    let example_unconstrained: Vec<LogitRow> = closed.unconstrained().cloned().collect();
    let flagged = closed.row(3, 0).is_some_and(|r| r.status == RowStatus::Unconstrained);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = Vec::new();
    for _ in 0..20 {
        let count = rng.random_range(1..=50);
        let paths: Vec<Vec<usize>> = (0..count)
            .map(|_| {
                let mut nodes: Vec<usize> = (0..6).collect();
                nodes.shuffle(&mut rng);
                nodes.truncate(rng.random_range(2..=6));
                nodes
            })
            .collect();
        random.push(fit_case(&PathDataset::from_paths(&paths)?)?);
    }
    let passed = flagged
        && example.linf_gap < LOGIT_TOLERANCE
        && random.iter().all(|c| c.linf_gap < LOGIT_TOLERANCE);
    Ok(LogitsReport {
        seed,
        tolerance: LOGIT_TOLERANCE,
        example,
        example_unconstrained,
        random,
        passed,
    })
}

/// The shortest path, when it exists and is unique.
pub fn unique_shortest_path(p: &ProbeProblem) -> Option<Vec<usize>> {
    let d = dijkstra(&p.graph, p.source);
    d[p.target]?;
    let tight = |u: usize, v: usize, w: f64| matches!((d[u], d[v]), (Some(a), Some(b)) if (a + w - b).abs() < 1e-9);
    let mut path = vec![p.target];
    let mut v = p.target;
    while v != p.source {
        let preds: Vec<usize> = p
            .graph
            .edges
            .iter()
            .filter(|&&(u, t, w)| t == v && tight(u, t, w))
            .map(|e| e.0)
            .collect();
        if preds.len() != 1 || path.contains(&preds[0]) {
            return None;
        }
        v = preds[0];
        path.push(v);
    }
    path.reverse();
    Some(path)
}

pub const PROBE_NODES: usize = 6;
pub const PROBE_PROBLEMS: usize = 8;
pub const PROBE_PERMUTATIONS: usize = 4;

/// Seeded problems with a unique shortest path of at least two edges.
pub fn probe_problems(seed: u64) -> Vec<ProbeProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < PROBE_PROBLEMS {
        let p = ProbeProblem {
            graph: random_digraph(&mut rng, PROBE_NODES, 0.35, 100..1000),
            source: 0,
            target: PROBE_NODES - 1,
        };
        if unique_shortest_path(&p).is_some_and(|path| path.len() >= 3) {
            out.push(p);
        }
    }
    out
}

/// Identity first, then seeded shuffles.
pub fn probe_permutations(seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut perms = vec![(0..PROBE_NODES).collect::<Vec<usize>>()];
    while perms.len() < PROBE_PERMUTATIONS + 1 {
        let mut p: Vec<usize> = (0..PROBE_NODES).collect();
        p.shuffle(&mut rng);
        if !perms.contains(&p) {
            perms.push(p);
        }
    }
    perms
}

/// A mock that answers every probe prompt, original or relabeled, with the
/// exact shortest path.
pub fn solver_responder(problems: &[ProbeProblem], perms: &[Vec<usize>]) -> Result<MockResponder, CliError> {
    let mut m = MockResponder::new();
    for p in problems {
        for perm in perms {
            let q = p.relabel(perm)?;
            let path = unique_shortest_path(&q).ok_or_else(|| CliError::Data("relabeling changed the optimum".into()))?;
            let text = path.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            m = m.exact(q.prompt(), text);
        }
    }
    Ok(m)
}

pub fn permute_suite(cfg: &RunConfig) -> Result<PermuteReport, CliError> {
    let problems = probe_problems(cfg.seed);
    let perms = probe_permutations(cfg.seed);
    let mock = match (cfg.llm.transport, &cfg.llm.mock_responses) {
        (crate::config::TransportMode::Mock, None) => Some(solver_responder(&problems, &perms)?),
        _ => None,
    };
    let client = build_client(cfg, mock)?;
    let probe = permutation_probe(&problems, &perms, &client)?;
    Ok(PermuteReport {
        seed: cfg.seed,
        nodes: PROBE_NODES,
        problems,
        probe,
    })
}

/// Runs `suite` and writes `theory_<suite>.json` under the output directory.
/// A suite whose oracle comparisons fail still writes its report, then
/// returns a data error.
pub fn cmd_theory(cfg: RunConfig, suite: Suite) -> Result<SuiteReport, CliError> {
    let report = match suite {
        Suite::Dp => SuiteReport::Dp(dp_suite(cfg.seed)?),
        Suite::Logits => SuiteReport::Logits(logits_suite(cfg.seed)?),
        Suite::Permute => SuiteReport::Permute(permute_suite(&cfg)?),
    };
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let name = match suite {
        Suite::Dp => "dp",
        Suite::Logits => "logits",
        Suite::Permute => "permute",
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    taskplan_core::write_atomic(&cfg.out_dir.join(format!("theory_{name}.json")), text.as_bytes())?;
    if !report.passed() {
        return Err(CliError::Data(format!("theory suite {name} found oracle mismatches")));
    }
    Ok(report)
}
