use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use taskplan_core::corpus::build_triplets;
use taskplan_core::embed::write_cache;
use taskplan_core::gnn::GnnArch;
use taskplan_core::llm::TransportKind;
use taskplan_core::metrics::{aggregate, render_reports, score_sample, ReportFormat};
use taskplan_core::planner::{
    fill_parameters, plan_direct, plan_with_retrieval, plan_with_search, EmbeddingRanker, PromptContext,
    Step1Candidates,
};
use taskplan_core::train::{train_model, ModelSpec, TrainReport};
use taskplan_core::{write_atomic, EmbeddingMatrix, EmbeddingProvider, LlmClient, Plan, Report};

use crate::config::{RunConfig, Strategy};
use crate::error::CliError;
use crate::runtime::{build_client, build_embedder, build_source_embedder, node_texts, worker_count, Workspace};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbedSummary {
    pub path: PathBuf,
    pub texts: usize,
    pub dim: usize,
}

/// Embeds node texts plus every sample step and writes the `EMB1` cache.
pub fn cmd_embed(cfg: RunConfig) -> Result<EmbedSummary, CliError> {
    let path = cfg
        .embed
        .cache
        .clone()
        .ok_or_else(|| CliError::Config("embed needs embed.cache as its output path".into()))?;
    let ws = Workspace::open(cfg)?;
    let mut seen = BTreeSet::new();
    let texts: Vec<String> = node_texts(&ws.graph)
        .into_iter()
        .chain(ws.samples.iter().flat_map(|s| s.steps.iter().cloned()))
        .filter(|t| seen.insert(t.clone()))
        .collect();
    let embedder = build_source_embedder(&ws.cfg);
    let m = embedder.embed_texts(&texts)?;
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    write_cache(&path, &m, &texts)?;
    log::info!("wrote {} embeddings to {}", texts.len(), path.display());
    Ok(EmbedSummary { path, texts: texts.len(), dim: m.dim() })
}

fn arch_for(s: Strategy) -> Result<GnnArch, CliError> {
    match s {
        Strategy::Sage => Ok(GnnArch::Sage),
        Strategy::Gcn => Ok(GnnArch::Gcn),
        other => Err(CliError::Config(format!("strategy {other} has no trainable weights; use sage or gcn"))),
    }
}

fn train_into(ws: &Workspace, strategy: Strategy, embedder: &dyn EmbeddingProvider) -> Result<TrainReport, CliError> {
    let cfg = &ws.cfg;
    let weights = cfg
        .gnn
        .weights
        .clone()
        .ok_or_else(|| CliError::Config("train needs gnn.weights as its output path".into()))?;
    let arch = arch_for(strategy)?;
    let (train, _) = ws.split()?;
    let x = ws.node_features(embedder)?;
    let triplets = build_triplets(&train, &ws.graph, &x, cfg.gnn.negatives)?;
    let spec = ModelSpec {
        arch,
        layers: cfg.gnn.layers,
        dim_out: cfg.model_dim_out(),
    };
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let report = train_model(&ws.graph, &x, &triplets, embedder, spec, &tc)?;
    let model = report
        .final_model
        .as_ref()
        .ok_or_else(|| CliError::Data("training produced no model".into()))?;
    if let Some(dir) = weights.parent() {
        ensure_dir(dir)?;
    }
    model.save(&weights)?;
    log::info!("saved {} weights to {}", strategy, weights.display());
    Ok(report)
}

/// Trains the configured architecture, writes the weights and
/// `train_report.json` under the output directory.
pub fn cmd_train(cfg: RunConfig) -> Result<TrainReport, CliError> {
    if cfg.samples.is_none() {
        return Err(CliError::Config("train needs samples".into()));
    }
    cfg.validate(&[], false)?;
    let ws = Workspace::open(cfg)?;
    let embedder = build_embedder(&ws.cfg)?;
    let report = train_into(&ws, ws.cfg.strategy, embedder.as_ref())?;
    ensure_dir(&ws.cfg.out_dir)?;
    write_json(&ws.cfg.out_dir.join("train_report.json"), &report)?;
    Ok(report)
}

/// Everything needed to plan one request with one strategy.
pub struct Planner<'a> {
    pub ws: &'a Workspace,
    pub client: &'a LlmClient,
    pub prompts: PromptContext,
    pub embedder: &'a dyn EmbeddingProvider,
    pub features: EmbeddingMatrix,
}

impl<'a> Planner<'a> {
    pub fn new(ws: &'a Workspace, client: &'a LlmClient, embedder: &'a dyn EmbeddingProvider) -> Result<Self, CliError> {
        Ok(Self {
            prompts: PromptContext::new(&ws.graph, ws.example()?),
            features: ws.node_features(embedder)?,
            ws,
            client,
            embedder,
        })
    }

    /// Node representations for `strategy`, when it retrieves.
    pub fn representations(&self, strategy: Strategy) -> Result<Option<EmbeddingMatrix>, CliError> {
        match strategy {
            Strategy::Sgc | Strategy::Sage | Strategy::Gcn => {
                Ok(Some(self.ws.node_representations(strategy, &self.features)?))
            }
            _ => Ok(None),
        }
    }

    pub fn plan(&self, strategy: Strategy, h: Option<&EmbeddingMatrix>, request: &str) -> Result<Plan, CliError> {
        let g = &self.ws.graph;
        let cfg = &self.ws.cfg;
        let plan = match (strategy.search(), h) {
            (Some(s), _) => {
                let sc = cfg.search_for(s);
                let ranker = EmbeddingRanker {
                    h: &self.features,
                    embedder: self.embedder,
                };
                let ranker = (sc.step1_candidates == Step1Candidates::TopMByEmbedding).then_some(&ranker);
                plan_with_search(request, g, self.client, &self.prompts, &sc, ranker)?
            }
            (None, Some(h)) => plan_with_retrieval(request, g, self.client, &self.prompts, h, self.embedder)?,
            (None, None) => plan_direct(request, g, self.client, &self.prompts)?,
        };
        if cfg.fill_parameters && !plan.failed {
            Ok(fill_parameters(request, plan, g, self.client, &self.prompts)?)
        } else {
            Ok(plan)
        }
    }
}

fn ensure_weights(ws: &Workspace, strategies: &[Strategy], embedder: &dyn EmbeddingProvider) -> Result<(), CliError> {
    for &s in strategies.iter().filter(|s| s.needs_weights()) {
        let missing = ws.cfg.gnn.weights.as_ref().is_some_and(|w| !w.exists());
        if missing && ws.cfg.gnn.train_first {
            train_into(ws, s, embedder)?;
        }
    }
    Ok(())
}

/// Plans one request and returns the plan JSON.
pub fn cmd_plan(cfg: RunConfig, request: &str) -> Result<serde_json::Value, CliError> {
    let strategy = cfg.strategy;
    cfg.validate(&[strategy], true)?;
    let ws = Workspace::open(cfg)?;
    let embedder = build_embedder(&ws.cfg)?;
    ensure_weights(&ws, &[strategy], embedder.as_ref())?;
    let client = build_client(&ws.cfg, None)?;
    let planner = Planner::new(&ws, &client, embedder.as_ref())?;
    let h = planner.representations(strategy)?;
    Ok(planner.plan(strategy, h.as_ref(), request)?.to_json())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub reports: Vec<Report>,
    pub files: Vec<PathBuf>,
}

/// Runs every configured strategy over the test split and writes
/// `report.{json,csv,md}` plus one `plans_<strategy>.jsonl` per strategy.
pub fn cmd_eval(cfg: RunConfig) -> Result<EvalOutput, CliError> {
    if cfg.samples.is_none() {
        return Err(CliError::Config("eval needs samples".into()));
    }
    let strategies = cfg.eval_strategies();
    cfg.validate(&strategies, true)?;
    let ws = Workspace::open(cfg)?;
    let (_, test) = ws.split()?;
    if test.is_empty() {
        return Err(CliError::Data("no test samples".into()));
    }
    let embedder = build_embedder(&ws.cfg)?;
    ensure_weights(&ws, &strategies, embedder.as_ref())?;
    let client = build_client(&ws.cfg, None)?;
    let planner = Planner::new(&ws, &client, embedder.as_ref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(&ws.cfg))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let live = client.transport_kind() == TransportKind::Live;
    let out = &ws.cfg.out_dir;
    ensure_dir(out)?;

    let mut reports = Vec::new();
    let mut files = Vec::new();
    for &strategy in &strategies {
        let h = planner.representations(strategy)?;
        let started = std::time::Instant::now();
        let plans: Vec<Plan> = pool.install(|| {
            test.par_iter()
                .map(|s| planner.plan(strategy, h.as_ref(), &s.request))
                .collect::<Result<_, _>>()
        })?;
        let scores = plans.iter().zip(&test).map(|(p, s)| score_sample(p, s, &ws.graph)).collect();
        let mut report = aggregate(scores, strategy.as_str(), &ws.cfg.llm.model)?;
        if live {
            report.wall_clock_s = Some(started.elapsed().as_secs_f64());
        }
        let mut lines = String::new();
        for (p, s) in plans.iter().zip(&test) {
            let rec = serde_json::json!({ "id": s.id, "strategy": strategy.as_str(), "plan": p.to_json() });
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
        let path = out.join(format!("plans_{strategy}.jsonl"));
        write_atomic(&path, lines.as_bytes())?;
        files.push(path);
        log::info!(
            "{strategy}: n-F1 {:.4} l-F1 {:.4} tokens {}",
            report.means.n_f1,
            report.means.l_f1,
            report.tokens_total
        );
        reports.push(report);
    }
    for fmt in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        let path = out.join(format!("report.{}", fmt.extension()));
        write_atomic(&path, render_reports(&reports, fmt).as_bytes())?;
        files.push(path);
    }
    Ok(EvalOutput { reports, files })
}
