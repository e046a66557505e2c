//! Planning samples, train/test splits and BPR training triplets.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbedError, EmbeddingMatrix};
use crate::taskgraph::{canonical_name, NodeId, TaskGraph};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("need {needed} eligible samples, only {available} available")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("node embeddings have {rows} rows for {nodes} nodes")]
    EmbeddingShapeMismatch { rows: usize, nodes: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// One invocation argument. TaskBench records plain strings; richer records
/// may carry a name and a type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Argument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub value: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl Argument {
    pub fn value(value: impl Into<String>) -> Self {
        Self {
            name: None,
            value: value.into(),
            kind: None,
        }
    }

    /// Reads either a bare JSON scalar or an object with `value` (and
    /// optionally `name` and `type`).
    pub fn from_json(v: &serde_json::Value) -> Self {
        use serde_json::Value;
        let scalar = |v: &Value| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        match v {
            Value::Object(map) => {
                let text = |k: &str| map.get(k).filter(|v| !v.is_null()).map(scalar);
                Self {
                    name: text("name"),
                    value: text("value").unwrap_or_default(),
                    kind: text("type"),
                }
            }
            other => Self::value(scalar(other)),
        }
    }

    /// The parameter type used by t-F1: the declared type, else the argument
    /// name, else a coarse kind inferred from the value.
    pub fn type_label(&self) -> String {
        if let Some(k) = &self.kind {
            return k.clone();
        }
        if let Some(n) = &self.name {
            return n.clone();
        }
        infer_value_kind(&self.value).to_string()
    }
}

fn infer_value_kind(value: &str) -> &'static str {
    let v = value.trim().to_ascii_lowercase();
    if v.starts_with("<node-") || v.starts_with("output ") {
        return "node-output";
    }
    let ext = v.rsplit_once('.').map(|(_, e)| e).unwrap_or("");
    match ext {
        "jpg" | "jpeg" | "png" | "gif" | "bmp" | "webp" => "image",
        "wav" | "mp3" | "flac" | "ogg" | "m4a" => "audio",
        "mp4" | "avi" | "mov" | "mkv" | "webm" => "video",
        _ => "text",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum SampleFlag {
    /// Non-empty steps whose count differs from the node count.
    AlignmentError { steps: usize, nodes: usize },
    /// A ground-truth node that is not in the graph.
    UnknownNode { name: String },
    /// Node order was not topological w.r.t. the links and was re-sorted.
    Realigned,
    /// The links contain a cycle, so no topological order exists.
    CyclicLinks,
    /// A link whose endpoints are not both among the sample's nodes.
    StrayLink { source: String, target: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub id: String,
    pub request: String,
    pub steps: Vec<String>,
    pub gt_nodes: Vec<String>,
    pub gt_links: Vec<(String, String)>,
    /// Per-node arguments, aligned with `gt_nodes`, when the record has any.
    pub gt_arguments: Option<Vec<Vec<Argument>>>,
    pub flags: Vec<SampleFlag>,
}

impl PlanSample {
    pub fn is_aligned(&self) -> bool {
        !self
            .flags
            .iter()
            .any(|f| matches!(f, SampleFlag::AlignmentError { .. } | SampleFlag::CyclicLinks))
    }

    /// `(step, node)` pairs, empty for samples whose steps are not aligned.
    pub fn step_pairs(&self) -> Vec<(&str, &str)> {
        if !self.is_aligned() || self.steps.is_empty() {
            return Vec::new();
        }
        self.steps
            .iter()
            .map(String::as_str)
            .zip(self.gt_nodes.iter().map(String::as_str))
            .collect()
    }

    /// The record as it appears in a samples file.
    pub fn to_record(&self) -> serde_json::Value {
        let nodes: Vec<serde_json::Value> = self
            .gt_nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut obj = serde_json::json!({ "task": n });
                if let Some(args) = &self.gt_arguments {
                    obj["arguments"] = serde_json::to_value(&args[i]).expect("json");
                }
                obj
            })
            .collect();
        serde_json::json!({
            "id": self.id,
            "request": self.request,
            "task_steps": self.steps,
            "task_nodes": nodes,
            "task_links": self.gt_links.iter()
                .map(|(s, t)| serde_json::json!({"source": s, "target": t}))
                .collect::<Vec<_>>(),
        })
    }
}

#[derive(Deserialize)]
struct SampleRecord {
    id: serde_json::Value,
    #[serde(alias = "user_request")]
    request: String,
    #[serde(default)]
    task_steps: Vec<String>,
    task_nodes: Vec<NodeRecord>,
    #[serde(default)]
    task_links: Vec<LinkRecord>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeRecord {
    Named {
        task: String,
        #[serde(default)]
        arguments: Option<Vec<serde_json::Value>>,
    },
    Bare(String),
}

#[derive(Deserialize)]
struct LinkRecord {
    source: String,
    target: String,
}

/// Parses one JSONL record and validates it against `g`.
pub fn parse_sample(line: &str, line_no: usize, g: &TaskGraph) -> Result<PlanSample, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let rec: SampleRecord = serde_json::from_value(value).map_err(|e| CorpusError::Schema {
        line: line_no,
        message: e.to_string(),
    })?;
    let id = match rec.id {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    };
    let mut gt_nodes = Vec::with_capacity(rec.task_nodes.len());
    let mut args = Vec::with_capacity(rec.task_nodes.len());
    let mut any_args = false;
    for n in rec.task_nodes {
        match n {
            NodeRecord::Named { task, arguments } => {
                any_args |= arguments.is_some();
                args.push(
                    arguments
                        .unwrap_or_default()
                        .iter()
                        .map(Argument::from_json)
                        .collect::<Vec<_>>(),
                );
                gt_nodes.push(canonical_name(&task));
            }
            NodeRecord::Bare(task) => {
                args.push(Vec::new());
                gt_nodes.push(canonical_name(&task));
            }
        }
    }
    let gt_links = rec
        .task_links
        .into_iter()
        .map(|l| (canonical_name(&l.source), canonical_name(&l.target)))
        .collect();
    let mut sample = PlanSample {
        id,
        request: rec.request,
        steps: rec.task_steps,
        gt_nodes,
        gt_links,
        gt_arguments: any_args.then_some(args),
        flags: Vec::new(),
    };
    validate_sample(&mut sample, g);
    Ok(sample)
}

fn validate_sample(s: &mut PlanSample, g: &TaskGraph) {
    for n in &s.gt_nodes {
        if !g.contains_node(n) {
            s.flags.push(SampleFlag::UnknownNode { name: n.clone() });
        }
    }
    if !s.steps.is_empty() && s.steps.len() != s.gt_nodes.len() {
        s.flags.push(SampleFlag::AlignmentError {
            steps: s.steps.len(),
            nodes: s.gt_nodes.len(),
        });
    }

    // Each link name resolves to the first node occurrence with that name.
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for (i, n) in s.gt_nodes.iter().enumerate() {
        pos.entry(n.as_str()).or_insert(i);
    }
    let mut deps: Vec<(usize, usize)> = Vec::new();
    let mut stray = Vec::new();
    for (src, tgt) in &s.gt_links {
        match (pos.get(src.as_str()), pos.get(tgt.as_str())) {
            (Some(&a), Some(&b)) => deps.push((a, b)),
            _ => stray.push(SampleFlag::StrayLink {
                source: src.clone(),
                target: tgt.clone(),
            }),
        }
    }
    s.flags.extend(stray);
    if deps.iter().all(|&(a, b)| a < b) {
        return;
    }
    match stable_topological_order(s.gt_nodes.len(), &deps) {
        Some(order) => {
            s.gt_nodes = order.iter().map(|&i| s.gt_nodes[i].clone()).collect();
            if let Some(args) = &mut s.gt_arguments {
                *args = order.iter().map(|&i| args[i].clone()).collect();
            }
            s.flags.push(SampleFlag::Realigned);
        }
        None => s.flags.push(SampleFlag::CyclicLinks),
    }
}

/// Kahn's algorithm, always releasing the smallest ready index so the
/// stated order is kept wherever the links allow it.
fn stable_topological_order(n: usize, deps: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut out = vec![Vec::new(); n];
    for &(a, b) in deps {
        if a == b {
            return None;
        }
        out[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &out[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    (order.len() == n).then_some(order)
}

pub fn load_samples(path: impl AsRef<Path>, g: &TaskGraph) -> Result<Vec<PlanSample>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s = parse_sample(line, i + 1, g)?;
        if !ids.insert(s.id.clone()) {
            return Err(CorpusError::DuplicateId(s.id));
        }
        samples.push(s);
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<PlanSample>,
    pub test: Vec<PlanSample>,
    pub seed: u64,
}

/// Seeded shuffle of the samples with at least two ground-truth nodes, then
/// the first `train_n` go to train and the next `test_n` to test.
pub fn make_split(samples: &[PlanSample], train_n: usize, test_n: usize, seed: u64) -> Result<Split, CorpusError> {
    let mut eligible: Vec<&PlanSample> = samples.iter().filter(|s| s.gt_nodes.len() >= 2).collect();
    let needed = train_n + test_n;
    if needed > eligible.len() {
        return Err(CorpusError::InsufficientSamples {
            needed,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    Ok(Split {
        train: eligible[..train_n].iter().map(|s| (*s).clone()).collect(),
        test: eligible[train_n..needed].iter().map(|s| (*s).clone()).collect(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTriplet {
    pub step_text: String,
    pub positive: NodeId,
    pub negative: NodeId,
}

/// Up to `k` nodes most cosine-similar to `positive`, excluding it; ties go to
/// the smaller id.
pub fn nearest_negatives(node_embeddings: &EmbeddingMatrix, positive: NodeId, k: usize) -> Result<Vec<NodeId>, EmbedError> {
    let target = node_embeddings.row(positive);
    let mut scored = Vec::with_capacity(node_embeddings.rows());
    for v in (0..node_embeddings.rows()).filter(|&v| v != positive) {
        scored.push((v, cosine(target, node_embeddings.row(v))?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(v, _)| v).collect())
}

/// For every aligned `(step, node)` pair, emits one triplet per textually
/// nearest negative. Pairs whose node is not in the graph are skipped.
pub fn build_triplets(
    train: &[PlanSample],
    g: &TaskGraph,
    node_embeddings: &EmbeddingMatrix,
    negatives_per_positive: usize,
) -> Result<Vec<TrainTriplet>, CorpusError> {
    if node_embeddings.rows() != g.node_count() {
        return Err(CorpusError::EmbeddingShapeMismatch {
            rows: node_embeddings.rows(),
            nodes: g.node_count(),
        });
    }
    let mut negatives: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    let mut out = Vec::new();
    for sample in train {
        for (step, node) in sample.step_pairs() {
            let Some(pos) = g.id_of(node) else { continue };
            if let std::collections::hash_map::Entry::Vacant(e) = negatives.entry(pos) {
                e.insert(nearest_negatives(node_embeddings, pos, negatives_per_positive)?);
            }
            for &neg in &negatives[&pos] {
                out.push(TrainTriplet {
                    step_text: step.to_string(),
                    positive: pos,
                    negative: neg,
                });
            }
        }
    }
    Ok(out)
}
