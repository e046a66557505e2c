//! Plan scoring and report emission.

use std::collections::HashSet;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PlanSample;
use crate::planner::Plan;
use crate::taskgraph::TaskGraph;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no sample scores to aggregate")]
    EmptyScores,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// F1 between two sets; 1 when both are empty.
pub fn set_f1<T: Eq + Hash>(pred: &HashSet<T>, gt: &HashSet<T>) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let hit = pred.intersection(gt).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / pred.len() as f64;
    let r = hit / gt.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub n_f1: f64,
    pub l_f1: f64,
    pub acc: f64,
    pub node_hall: f64,
    pub edge_hall: f64,
    pub param_t_f1: Option<f64>,
    pub param_v_f1: Option<f64>,
    pub tokens: u64,
    pub llm_calls: usize,
    pub failed: bool,
}

fn ratio(bad: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        bad as f64 / total as f64
    }
}

/// Scores one plan against its ground truth with set semantics. A failed
/// plan scores 0 on every quality metric but keeps its token count.
pub fn score_sample(plan: &Plan, sample: &PlanSample, g: &TaskGraph) -> SampleScore {
    let tokens = plan.token_usage().total();
    let has_gt_args = sample.gt_arguments.is_some();
    if plan.failed {
        return SampleScore {
            id: sample.id.clone(),
            n_f1: 0.0,
            l_f1: 0.0,
            acc: 0.0,
            node_hall: 0.0,
            edge_hall: 0.0,
            param_t_f1: has_gt_args.then_some(0.0),
            param_v_f1: has_gt_args.then_some(0.0),
            tokens,
            llm_calls: plan.llm_calls(),
            failed: true,
        };
    }
    let pred_nodes: HashSet<&str> = plan.nodes.iter().map(String::as_str).collect();
    let gt_nodes: HashSet<&str> = sample.gt_nodes.iter().map(String::as_str).collect();
    let pred_links: HashSet<(&str, &str)> = plan.links.iter().map(|(s, t)| (s.as_str(), t.as_str())).collect();
    let gt_links: HashSet<(&str, &str)> = sample.gt_links.iter().map(|(s, t)| (s.as_str(), t.as_str())).collect();

    let node_hall = ratio(pred_nodes.iter().filter(|n| !g.contains_node(n)).count(), pred_nodes.len());
    let edge_hall = ratio(
        pred_links.iter().filter(|(s, t)| !g.contains_edge(s, t)).count(),
        pred_links.len(),
    );

    let (param_t_f1, param_v_f1) = match (&plan.arguments, &sample.gt_arguments) {
        (Some(pa), Some(ga)) => {
            let collect = |nodes: &[String], args: &[Vec<crate::corpus::Argument>], typed: bool| -> HashSet<(String, String)> {
                nodes
                    .iter()
                    .zip(args)
                    .flat_map(|(n, a)| {
                        a.iter().map(move |arg| {
                            let key = if typed { arg.type_label() } else { arg.value.trim().to_string() };
                            (n.clone(), key)
                        })
                    })
                    .collect()
            };
            (
                Some(set_f1(&collect(&plan.nodes, pa, true), &collect(&sample.gt_nodes, ga, true))),
                Some(set_f1(&collect(&plan.nodes, pa, false), &collect(&sample.gt_nodes, ga, false))),
            )
        }
        _ => (None, None),
    };

    SampleScore {
        id: sample.id.clone(),
        n_f1: set_f1(&pred_nodes, &gt_nodes),
        l_f1: set_f1(&pred_links, &gt_links),
        acc: if pred_nodes == gt_nodes { 1.0 } else { 0.0 },
        node_hall,
        edge_hall,
        param_t_f1,
        param_v_f1,
        tokens,
        llm_calls: plan.llm_calls(),
        failed: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub n_f1: f64,
    pub l_f1: f64,
    pub acc: f64,
    pub node_hall: f64,
    pub edge_hall: f64,
    pub param_t_f1: Option<f64>,
    pub param_v_f1: Option<f64>,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub strategy: String,
    pub model: String,
    pub samples: usize,
    pub means: MetricMeans,
    pub tokens_total: u64,
    /// Mean tokens per sample in thousands.
    pub tokens_per_sample_k: f64,
    pub llm_calls_total: usize,
    pub parse_failures: usize,
    /// Parameter F1s use simplified typing: declared type, else argument
    /// name, else a kind inferred from the value.
    pub parameter_metrics: String,
    /// Omitted for replay and mock runs so reports stay byte-identical.
    pub wall_clock_s: Option<f64>,
    pub per_sample: Vec<SampleScore>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Macro averages over samples.
pub fn aggregate(scores: Vec<SampleScore>, strategy: &str, model: &str) -> Result<Report, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let m = |f: fn(&SampleScore) -> f64| mean(scores.iter().map(f)).expect("non-empty");
    let means = MetricMeans {
        n_f1: m(|s| s.n_f1),
        l_f1: m(|s| s.l_f1),
        acc: m(|s| s.acc),
        node_hall: m(|s| s.node_hall),
        edge_hall: m(|s| s.edge_hall),
        param_t_f1: mean(scores.iter().filter_map(|s| s.param_t_f1)),
        param_v_f1: mean(scores.iter().filter_map(|s| s.param_v_f1)),
    };
    let tokens_total: u64 = scores.iter().map(|s| s.tokens).sum();
    Ok(Report {
        report_version: REPORT_VERSION,
        strategy: strategy.to_string(),
        model: model.to_string(),
        samples: scores.len(),
        means,
        tokens_total,
        tokens_per_sample_k: tokens_total as f64 / scores.len() as f64 / 1000.0,
        llm_calls_total: scores.iter().map(|s| s.llm_calls).sum(),
        parse_failures: scores.iter().filter(|s| s.failed).count(),
        parameter_metrics: "simplified parameter typing".into(),
        wall_clock_s: None,
        per_sample: scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "strategy",
    "model",
    "samples",
    "n_f1",
    "l_f1",
    "acc",
    "node_hall",
    "edge_hall",
    "param_t_f1",
    "param_v_f1",
    "tokens_total",
    "tok_k",
    "parse_failures",
];

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

/// Deterministic text rendering. JSON is an array of reports; CSV and
/// markdown have one row per report.
pub fn render_reports(reports: &[Report], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("report json");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = CSV_COLUMNS.join(",");
            s.push('\n');
            for r in reports {
                let m = &r.means;
                let row = [
                    csv_field(&r.strategy),
                    csv_field(&r.model),
                    r.samples.to_string(),
                    format!("{:.6}", m.n_f1),
                    format!("{:.6}", m.l_f1),
                    format!("{:.6}", m.acc),
                    format!("{:.6}", m.node_hall),
                    format!("{:.6}", m.edge_hall),
                    opt(m.param_t_f1, 6),
                    opt(m.param_v_f1, 6),
                    r.tokens_total.to_string(),
                    format!("{:.4}", r.tokens_per_sample_k),
                    r.parse_failures.to_string(),
                ];
                s.push_str(&row.join(","));
                s.push('\n');
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = String::from(
                "| Model | Method | n-F1 | l-F1 | Acc | Node Hall. | Edge Hall. | # Tok |\n|---|---|---:|---:|---:|---:|---:|---:|\n",
            );
            for r in reports {
                let m = &r.means;
                s.push_str(&format!(
                    "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                    r.model,
                    r.strategy,
                    m.n_f1 * 100.0,
                    m.l_f1 * 100.0,
                    m.acc * 100.0,
                    m.node_hall * 100.0,
                    m.edge_hall * 100.0,
                    r.tokens_per_sample_k
                ));
            }
            s.push_str("\nScores in %; # Tok is mean tokens per sample in thousands.\n");
            s
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_report(reports: &[Report], format: ReportFormat, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    crate::write_atomic(path.as_ref(), render_reports(reports, format).as_bytes())?;
    Ok(())
}
