//! Acceptance suite. Runs without the libtest harness so each criterion
//! prints exactly one `[PASS]` or `[FAIL]` line; exits non-zero on failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use taskplan_cli::config::{RunConfig, Strategy};
use taskplan_cli::suites::{cmd_theory, dp_suite, logits_suite, Suite};
use taskplan_cli::{cmd_eval, cmd_plan};
use taskplan_core::corpus::PlanSample;
use taskplan_core::embed::{dot_scores, EmbeddingMatrix, HashEmbedder};
use taskplan_core::gnn::{GnnArch, GnnModel, GraphContext};
use taskplan_core::llm::{PromptTemplate, TemplateName};
use taskplan_core::metrics::score_sample;
use taskplan_core::planner::{decode_path, retrieve_path, Plan};
use taskplan_core::taskgraph::{LinkKind, TaskGraph};
use taskplan_core::theory::RowStatus;
use taskplan_core::train::{grad_check, train_encoded, EncodedTriplet, ModelSpec, Objective, TrainConfig};

const RETRIEVAL_RUNS: usize = 1000;
const RETRIEVAL_BUDGET: Duration = Duration::from_secs(10);
const FORWARD_SEEDS: u64 = 100;
const FORWARD_TOL: f64 = 1e-6;
const FORWARD_BUDGET: Duration = Duration::from_secs(5);
const EQUIVARIANCE_TRIALS: usize = 100;
const EQUIVARIANCE_TOL: f64 = 1e-6;
const GRAD_BATCHES: usize = 50;
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPSILON: f64 = 1e-5;
const SANITY_NODES: usize = 32;
const SANITY_ACCURACY: f64 = 0.95;
const SANITY_BUDGET: Duration = Duration::from_secs(30);
const DP_BUDGET: Duration = Duration::from_secs(20);
const TOKEN_RATIO: (f64, f64) = (5.0, 10.0);

const PINNED_PROMPTS: [(TemplateName, &str); 4] = [
    (TemplateName::DirectInference, "9fce44a7d65c788b4af7091935a9d52ea71c9212f8e13007950a037733e3635a"),
    (TemplateName::TaskAssessment, "07bc31ba6ef29e025852ed9a74886901ddb81562905753d89a61ec7172d53902"),
    (TemplateName::PathSelection, "3ecd6557fa5d380c332ee609d6e88821d031872fba19ffe95c2a4167813a9ffc"),
    (TemplateName::ParameterFill, "b9b7c30d0902fad779be81f5b577cf881a926457519188291b7a9e3780c38321"),
];

type Dense = Vec<Vec<f64>>;
type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn graph(n: usize, edges: &[(usize, usize)]) -> TaskGraph {
    let names: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    TaskGraph::from_parts(
        names.iter().map(|s| (s.as_str(), format!("does {s}"))),
        edges.iter().map(|&(s, t)| (names[s].as_str(), names[t].as_str(), LinkKind::Resource)),
    )
    .expect("graph")
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            if rng.random_bool(p) {
                e.push((a, b));
            }
        }
    }
    e
}

fn random_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Dense {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_matrix(d: &Dense) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(d).expect("matrix")
}

fn to_dense(m: &EmbeddingMatrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn mul(a: &Dense, b: &Dense) -> Dense {
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..cols).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn max_abs(a: &Dense, b: &Dense) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn symmetric(n: usize, edges: &[(usize, usize)]) -> Dense {
    let mut a = vec![vec![0.0; n]; n];
    for &(s, t) in edges {
        a[s][t] = 1.0;
        a[t][s] = 1.0;
    }
    a
}

/// `D^-1/2 (A_sym + I) D^-1/2`.
fn dense_normalized(n: usize, edges: &[(usize, usize)]) -> Dense {
    let mut a = symmetric(n, edges);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    (0..n).map(|i| (0..n).map(|j| a[i][j] / (d[i] * d[j]).sqrt()).collect()).collect()
}

/// Row-mean over symmetric neighbors; isolated rows stay zero.
fn dense_mean(n: usize, edges: &[(usize, usize)]) -> Dense {
    symmetric(n, edges)
        .into_iter()
        .map(|r| {
            let d: f64 = r.iter().sum();
            r.into_iter().map(|x| if d > 0.0 { x / d } else { 0.0 }).collect()
        })
        .collect()
}

fn dense_forward(m: &GnnModel, n: usize, edges: &[(usize, usize)], x: &Dense) -> Dense {
    let a = dense_normalized(n, edges);
    match m.arch {
        GnnArch::Sgc => (0..m.layers).fold(x.clone(), |h, _| mul(&a, &h)),
        GnnArch::Gcn => {
            let mut h = x.clone();
            for (l, w) in m.weights.iter().enumerate() {
                h = mul(&mul(&a, &h), &to_dense(w));
                if l + 1 < m.weights.len() {
                    h = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
                }
            }
            h
        }
        GnnArch::Sage => {
            let own = mul(x, &to_dense(&m.weights[0]));
            let nb = mul(&mul(&dense_mean(n, edges), x), &to_dense(&m.weights[1]));
            own.iter().zip(&nb).map(|(p, q)| p.iter().zip(q).map(|(a, b)| a + b).collect()).collect()
        }
    }
}

fn random_model(rng: &mut ChaCha8Rng, arch: GnnArch, dim_in: usize, dim_out: usize) -> GnnModel {
    let seed = rng.random();
    match arch {
        GnnArch::Sgc => GnnModel::sgc(rng.random_range(0..=3), dim_in),
        GnnArch::Gcn => GnnModel::init(GnnArch::Gcn, rng.random_range(1..=2), dim_in, dim_out, seed).expect("gcn"),
        GnnArch::Sage => GnnModel::init(GnnArch::Sage, 1, dim_in, dim_out, seed).expect("sage"),
    }
}

const ARCHS: [GnnArch; 3] = [GnnArch::Sgc, GnnArch::Gcn, GnnArch::Sage];

fn dummy_sample(g: &TaskGraph) -> PlanSample {
    PlanSample {
        id: "probe".into(),
        request: String::new(),
        steps: Vec::new(),
        gt_nodes: vec![g.name(0).to_string()],
        gt_links: Vec::new(),
        gt_arguments: None,
        flags: Vec::new(),
    }
}

fn zero_hallucination() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut dead_end_runs = 0;
    for run in 0..RETRIEVAL_RUNS {
        let n = rng.random_range(2..=12);
        let p = rng.random_range(0.05..0.5);
        let edges = random_edges(&mut rng, n, p);
        let g = graph(n, &edges);
        let dim = 8;
        let emb = HashEmbedder::new(dim, rng.random());
        let x = to_matrix(&(0..n).map(|v| emb.vector(&format!("node {v} run {run}"))).collect::<Vec<_>>());
        let m = random_model(&mut rng, ARCHS[run % 3], dim, dim);
        let h = GraphContext::new(&g).forward(&x, &m).map_err(|e| e.to_string())?;
        let steps: Vec<String> = (0..rng.random_range(1..=6)).map(|i| format!("step {i} of run {run}")).collect();
        let plan = retrieve_path(&steps, &g, &h, &emb).map_err(|e| e.to_string())?;
        dead_end_runs += usize::from(!plan.flags.is_empty());
        let score = score_sample(&plan, &dummy_sample(&g), &g);
        ensure(plan.nodes.len() == steps.len(), format!("run {run}: {} nodes", plan.nodes.len()))?;
        ensure(
            score.node_hall == 0.0 && score.edge_hall == 0.0,
            format!("run {run}: node_hall {} edge_hall {}", score.node_hall, score.edge_hall),
        )?;
        ensure(plan.links.iter().all(|(s, t)| g.contains_edge(s, t)), format!("run {run}: non-edge link"))?;
    }
    let took = started.elapsed();
    ensure(took < RETRIEVAL_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{RETRIEVAL_RUNS} runs ({dead_end_runs} with dead ends), node_hall = edge_hall = 0, {took:.2?}"))
}

fn forward_oracle() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..FORWARD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=8);
        let edges = random_edges(&mut rng, n, 0.35);
        let g = graph(n, &edges);
        let (din, dout) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let x = random_dense(&mut rng, n, din);
        for arch in ARCHS {
            let m = random_model(&mut rng, arch, din, dout);
            let got = GraphContext::new(&g).forward(&to_matrix(&x), &m).map_err(|e| e.to_string())?;
            let err = max_abs(&to_dense(&got), &dense_forward(&m, n, &edges, &x));
            worst = worst.max(err);
            ensure(err < FORWARD_TOL, format!("seed {seed} {arch:?}: error {err:e}"))?;
        }
    }
    let took = started.elapsed();
    ensure(took < FORWARD_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{FORWARD_SEEDS} seeds x 3 archs, max abs error {worst:.1e} < {FORWARD_TOL:e}, {took:.2?}"))
}

/// True when every decision along `path` was a strict argmax.
fn unique_decisions(g: &TaskGraph, h: &EmbeddingMatrix, steps: &EmbeddingMatrix, path: &[usize]) -> bool {
    path.iter().enumerate().all(|(i, &v)| {
        let cands: Vec<usize> = match i {
            0 => (0..g.node_count()).collect(),
            _ if g.neighbors(path[i - 1]).expect("id").is_empty() => (0..g.node_count()).collect(),
            _ => g.neighbors(path[i - 1]).expect("id").to_vec(),
        };
        let s = dot_scores(h, steps.row(i), &cands).expect("scores");
        let best = s.iter().find(|(u, _)| *u == v).expect("chosen").1;
        s.iter().filter(|(_, sc)| (*sc - best).abs() < 1e-12).count() == 1
    })
}

fn equivariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut trials, mut attempts, mut worst) = (0, 0, 0.0f64);
    while trials < EQUIVARIANCE_TRIALS {
        attempts += 1;
        ensure(attempts <= 20 * EQUIVARIANCE_TRIALS, "too few trials with a unique argmax")?;
        let n = rng.random_range(1..=8);
        let edges = random_edges(&mut rng, n, 0.35);
        let g = graph(n, &edges);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let r = g.relabel(&perm).map_err(|e| e.to_string())?;
        let x = to_matrix(&random_dense(&mut rng, n, 4));
        let xp = x.permute_rows(&perm);
        for arch in ARCHS {
            let m = random_model(&mut rng, arch, 4, 4);
            let h = GraphContext::new(&g).forward(&x, &m).map_err(|e| e.to_string())?;
            let hp = GraphContext::new(&r).forward(&xp, &m).map_err(|e| e.to_string())?;
            let err = hp.max_abs_diff(&h.permute_rows(&perm));
            worst = worst.max(err);
            ensure(err < EQUIVARIANCE_TOL, format!("{arch:?}: error {err:e}"))?;
        }
        let len = rng.random_range(1..=5);
        let steps = to_matrix(&random_dense(&mut rng, len, 4));
        let (path, _) = decode_path(&g, &x, &steps).map_err(|e| e.to_string())?;
        if !unique_decisions(&g, &x, &steps, &path) {
            continue;
        }
        let (rpath, _) = decode_path(&r, &xp, &steps).map_err(|e| e.to_string())?;
        let a: Vec<&str> = path.iter().map(|&v| g.name(v)).collect();
        let b: Vec<&str> = rpath.iter().map(|&v| r.name(v)).collect();
        ensure(a == b, format!("trial {trials}: {a:?} vs {b:?}"))?;
        trials += 1;
    }
    Ok(format!("{trials} trials, forward error {worst:.1e} < {EQUIVARIANCE_TOL:e}, retrieval identical"))
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for b in 0..GRAD_BATCHES {
        let n = rng.random_range(2..=6);
        let edges = random_edges(&mut rng, n, 0.4);
        let g = graph(n, &edges);
        let ctx = GraphContext::new(&g);
        let dim = rng.random_range(2..=4);
        let features = to_matrix(&random_dense(&mut rng, n, dim));
        let steps = to_matrix(&random_dense(&mut rng, 4, dim));
        let batch: Vec<EncodedTriplet> = (0..rng.random_range(1..=4))
            .map(|i| {
                let positive = rng.random_range(0..n);
                let negative = (positive + rng.random_range(1..n)) % n;
                EncodedTriplet { step: i, positive, negative }
            })
            .collect();
        let arch = if b % 2 == 0 { GnnArch::Sage } else { GnnArch::Gcn };
        let layers = if arch == GnnArch::Gcn { rng.random_range(1..=2) } else { 1 };
        let model = GnnModel::init(arch, layers, dim, dim, rng.random()).map_err(|e| e.to_string())?;
        let obj = Objective { ctx: &ctx, features: &features, steps: &steps, l2: 0.01 };
        let err = grad_check(&obj, &model, &batch, GRAD_EPSILON).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        ensure(err < GRAD_TOL, format!("batch {b} {arch:?}: relative error {err:e}"))?;
    }
    Ok(format!("{GRAD_BATCHES} batches, max relative error {worst:.1e} < {GRAD_TOL:e}"))
}

fn noisy_steps(rng: &mut ChaCha8Rng, per_node: usize) -> (EmbeddingMatrix, Vec<usize>) {
    let d = SANITY_NODES;
    let noise = Normal::new(0.0, 0.1 / (d as f64).sqrt()).expect("normal");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for v in 0..d {
        for _ in 0..per_node {
            let mut x: Vec<f64> = (0..d).map(|_| noise.sample(rng)).collect();
            x[v] += 1.0;
            rows.push(x);
            labels.push(v);
        }
    }
    (to_matrix(&rows), labels)
}

fn training_sanity() -> Verdict {
    let started = Instant::now();
    let n = SANITY_NODES;
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 5) % n)]).collect();
    let g = graph(n, &edges);
    let ctx = GraphContext::new(&g);
    let mut features = EmbeddingMatrix::identity(n);
    features.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (train_steps, train_labels) = noisy_steps(&mut rng, 16);
    let (test_steps, test_labels) = noisy_steps(&mut rng, 8);
    let triplets: Vec<EncodedTriplet> = train_labels
        .iter()
        .enumerate()
        .flat_map(|(s, &pos)| {
            (0..n).filter(move |&v| v != pos).map(move |neg| EncodedTriplet { step: s, positive: pos, negative: neg })
        })
        .collect();
    let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
    ensure(cfg.epochs == 20 && cfg.lr == 1e-3, "default hyperparameters changed")?;
    let spec = ModelSpec { arch: GnnArch::Sage, layers: 1, dim_out: n };
    let report = train_encoded(&ctx, &features, &train_steps, &triplets, spec, &cfg).map_err(|e| e.to_string())?;
    let model = report.final_model.as_ref().ok_or("no model")?;
    let h = ctx.forward(&features, model).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..n).collect();
    let hits = test_labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let s = dot_scores(&h, test_steps.row(*i), &all).expect("scores");
            let best = s.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty").0;
            best == label
        })
        .count();
    let acc = hits as f64 / test_labels.len() as f64;
    let took = started.elapsed();
    ensure(acc >= SANITY_ACCURACY, format!("held-out accuracy {acc:.3}"))?;
    ensure(took < SANITY_BUDGET, format!("took {took:?}"))?;
    Ok(format!(
        "SAGE held-out top-1 {:.1}% >= {:.0}% after {} epochs, {took:.2?}",
        100.0 * acc,
        100.0 * SANITY_ACCURACY,
        report.epoch_losses.len()
    ))
}

fn out_config(dir: &Path) -> RunConfig {
    RunConfig {
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn frequency_logits_theorem() -> Verdict {
    let r = logits_suite(0).map_err(|e| e.to_string())?;
    ensure(r.random.len() == 20, "expected 20 random datasets")?;
    let worst = r.random.iter().map(|c| c.linf_gap).fold(r.example.linf_gap, f64::max);
    ensure(r.passed, format!("max gap {worst:e}"))?;
    let flagged = r
        .example_unconstrained
        .iter()
        .any(|row| row.target == 3 && row.current == 0 && row.status == RowStatus::Unconstrained);
    ensure(flagged, "(t=d, v=a) row not flagged")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cmd_theory(out_config(dir.path()), Suite::Logits).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("theory_logits.json")).map_err(|e| e.to_string())?;
    ensure(text.contains("\"UNCONSTRAINED\""), "report lacks the UNCONSTRAINED flag")?;
    Ok(format!("20 datasets + example, max L-inf gap {worst:.1e} < 1e-3, (d,a) UNCONSTRAINED in report"))
}

fn dp_oracles() -> Verdict {
    let started = Instant::now();
    let r = dp_suite(0).map_err(|e| e.to_string())?;
    let cases: Vec<(String, usize, usize)> = r.checks.iter().map(|c| (c.name.clone(), c.cases, c.mismatches)).collect();
    for (name, want) in [("bellman_ford_vs_dijkstra", 100), ("lis_vs_exhaustive", 100), ("held_karp_vs_permutations", 20)] {
        let c = cases.iter().find(|c| c.0 == name).ok_or(format!("missing check {name}"))?;
        ensure(c.1 == want && c.2 == 0, format!("{name}: {} mismatches of {}", c.2, c.1))?;
    }
    ensure(r.passed, "suite reported failure")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cmd_theory(out_config(dir.path()), Suite::Dp).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    ensure(took < DP_BUDGET, format!("took {took:?}"))?;
    Ok(format!("Bellman-Ford 100/100, LIS 100/100, Held-Karp 20/20, {took:.2?}"))
}

struct MetricCase {
    pred_nodes: &'static [&'static str],
    pred_links: &'static [(&'static str, &'static str)],
    gt_nodes: &'static [&'static str],
    gt_links: &'static [(&'static str, &'static str)],
    failed: bool,
    /// n-F1, l-F1, acc, node_hall, edge_hall
    want: [f64; 5],
}

const fn case(
    pred_nodes: &'static [&'static str],
    pred_links: &'static [(&'static str, &'static str)],
    gt_nodes: &'static [&'static str],
    gt_links: &'static [(&'static str, &'static str)],
    want: [f64; 5],
) -> MetricCase {
    MetricCase { pred_nodes, pred_links, gt_nodes, gt_links, failed: false, want }
}

/// Graph: A->B, B->C, C->D, A->C, D->E. Expected values scored by hand.
fn metric_cases() -> Vec<MetricCase> {
    vec![
        case(&["A", "B", "C"], &[("A", "B"), ("B", "C")], &["A", "B", "D"], &[("A", "B"), ("B", "D")], [2.0 / 3.0, 0.5, 0.0, 0.0, 0.0]),
        case(&["A", "B", "C"], &[("A", "B"), ("B", "C")], &["A", "B", "C"], &[("A", "B"), ("B", "C")], [1.0, 1.0, 1.0, 0.0, 0.0]),
        case(&[], &[], &["A", "B"], &[("A", "B")], [0.0, 0.0, 0.0, 0.0, 0.0]),
        case(&["A"], &[], &["A"], &[], [1.0, 1.0, 1.0, 0.0, 0.0]),
        case(&["A", "X"], &[("A", "X")], &["A", "B"], &[("A", "B")], [0.5, 0.0, 0.0, 0.5, 1.0]),
        case(&["A", "D"], &[("A", "D")], &["A", "D"], &[("A", "D")], [1.0, 1.0, 1.0, 0.0, 1.0]),
        case(&["A", "B", "A"], &[("A", "B"), ("B", "A")], &["A", "B"], &[("A", "B")], [1.0, 2.0 / 3.0, 1.0, 0.0, 0.5]),
        case(&["A", "B", "C", "D"], &[("A", "B"), ("B", "C"), ("C", "D")], &["B", "C"], &[("B", "C")], [2.0 / 3.0, 0.5, 0.0, 0.0, 0.0]),
        case(&["D", "E"], &[("D", "E")], &["A", "B"], &[("A", "B")], [0.0, 0.0, 0.0, 0.0, 0.0]),
        case(&["X", "X", "Y", "A"], &[("X", "Y"), ("Y", "A")], &["A"], &[], [0.5, 0.0, 0.0, 2.0 / 3.0, 1.0]),
        MetricCase { failed: true, ..case(&["A", "B"], &[("A", "B")], &["A", "B"], &[("A", "B")], [0.0; 5]) },
        case(&["B", "A", "C"], &[("A", "B"), ("A", "C")], &["A", "B", "C"], &[("A", "B"), ("A", "C")], [1.0, 1.0, 1.0, 0.0, 0.0]),
    ]
}

fn metric_oracle() -> Verdict {
    let g = TaskGraph::from_parts(
        ["A", "B", "C", "D", "E"].map(|n| (n, format!("task {n}"))),
        [("A", "B"), ("B", "C"), ("C", "D"), ("A", "C"), ("D", "E")].map(|(s, t)| (s, t, LinkKind::Resource)),
    )
    .map_err(|e| e.to_string())?;
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let pairs = |xs: &[(&str, &str)]| xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect::<Vec<_>>();
    let cases = metric_cases();
    for (i, c) in cases.iter().enumerate() {
        let mut plan = Plan {
            nodes: strings(c.pred_nodes),
            links: pairs(c.pred_links),
            failed: c.failed,
            ..Plan::default()
        };
        plan.mark_hallucinations(&g);
        let sample = PlanSample {
            id: format!("m{i}"),
            request: String::new(),
            steps: Vec::new(),
            gt_nodes: strings(c.gt_nodes),
            gt_links: pairs(c.gt_links),
            gt_arguments: None,
            flags: Vec::new(),
        };
        let s = score_sample(&plan, &sample, &g);
        let got = [s.n_f1, s.l_f1, s.acc, s.node_hall, s.edge_hall];
        ensure(got == c.want, format!("case {}: got {got:?}, want {:?}", i + 1, c.want))?;
    }
    Ok(format!("{} hand-scored cases match exactly, incl. {{A,B,C}} vs {{A,B,D}} -> 2/3", cases.len()))
}

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/hf10/run.toml")
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("out dir")
        .map(|e| {
            let p = e.expect("entry").path();
            (p.file_name().expect("name").to_string_lossy().into_owned(), std::fs::read(&p).expect("read"))
        })
        .collect();
    files.sort();
    files
}

fn plan_lines(dir: &Path, strategy: &str) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join(format!("plans_{strategy}.jsonl")))
        .expect("plans")
        .lines()
        .map(|l| serde_json::from_str(l).expect("json"))
        .collect()
}

fn replay_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    let mut reports = Vec::new();
    for dir in &runs {
        let mut cfg = RunConfig::load(&fixture_config()).map_err(|e| e.to_string())?;
        cfg.out_dir = dir.clone();
        reports.push(cmd_eval(cfg).map_err(|e| e.to_string())?.reports);
    }
    let (a, b) = (read_dir_bytes(&runs[0]), read_dir_bytes(&runs[1]));
    ensure(a.len() == 8, format!("{} output files", a.len()))?;
    ensure(a == b, "outputs differ between runs")?;

    let samples = plan_lines(&runs[0], "direct").len();
    ensure(samples == 10, format!("{samples} test samples"))?;
    let calls = |s: &str| -> Vec<(u64, usize)> {
        plan_lines(&runs[0], s)
            .iter()
            .map(|r| {
                let p = &r["plan"];
                (p["token_usage"]["llm_calls"].as_u64().unwrap_or(0), p["task_steps"].as_array().map_or(0, Vec::len))
            })
            .collect()
    };
    ensure(calls("direct").iter().all(|c| c.0 == 1), "direct must make one call per sample")?;
    ensure(calls("sgc").iter().all(|c| c.0 == 1), "sgc must make one call per sample")?;
    // Greedy: one decomposition call, then one assessment per step.
    ensure(
        calls("greedy").iter().all(|&(n, steps)| n as usize == steps + 1),
        "greedy must make |steps| assessment calls per sample",
    )?;
    let report = |s: &str| reports[0].iter().find(|r| r.strategy == s).expect("report");
    ensure(report("sgc").means.node_hall == 0.0, "sgc node_hall mean is not 0")?;
    let ratio = report("beam").tokens_total as f64 / report("sgc").tokens_total as f64;
    ensure(
        (TOKEN_RATIO.0..=TOKEN_RATIO.1).contains(&ratio),
        format!("beam/sgc token ratio {ratio:.2}"),
    )?;

    let mut cfg = RunConfig::load(&fixture_config()).map_err(|e| e.to_string())?;
    cfg.strategy = Strategy::Sgc;
    let miss = cmd_plan(cfg, "A request that was never recorded").err().map(|e| e.exit_code());
    ensure(miss == Some(2), format!("unseen request gave {miss:?}"))?;
    Ok(format!(
        "two runs byte-identical ({} files); calls direct=1, sgc=1, greedy=1+|steps|; beam/sgc tokens {ratio:.1}x; replay miss exits 2",
        a.len()
    ))
}

fn prompt_fidelity() -> Verdict {
    for (name, want) in PINNED_PROMPTS {
        let got = hex::encode(Sha256::digest(PromptTemplate::bundled(name).body.as_bytes()));
        ensure(got == want, format!("{name}: {got}"))?;
    }
    Ok("direct_inference, task_assessment, path_selection, parameter_fill match pinned SHA-256".into())
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("zero-hallucination retrieval", zero_hallucination),
        ("GNN forward oracle", forward_oracle),
        ("permutation equivariance", equivariance),
        ("BPR gradient check", gradient_check),
        ("training sanity", training_sanity),
        ("frequency logits", frequency_logits_theorem),
        ("DP oracles", dp_oracles),
        ("metric oracle", metric_oracle),
        ("replay determinism and call audit", replay_determinism),
        ("prompt fidelity", prompt_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match verdict {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
