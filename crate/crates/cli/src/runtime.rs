//! Builds clients, embedders and node representations from a [`RunConfig`].

use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use taskplan_core::corpus::load_samples;
use taskplan_core::embed::{FileCacheEmbedder, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig};
use taskplan_core::gnn::{build_adjacency, sgc_forward, GnnArch, GnnModel, GraphContext};
use taskplan_core::llm::{DecodingParams, LiveConfig, MockResponder};
use taskplan_core::taskgraph::load_graph;
use taskplan_core::{EmbeddingMatrix, EmbeddingProvider, LlmClient, PlanSample, TaskGraph};

use crate::config::{EmbedProvider, RunConfig, Strategy, TransportMode};
use crate::error::CliError;

pub fn decoding_params(cfg: &RunConfig) -> DecodingParams {
    DecodingParams {
        model: cfg.llm.model.clone(),
        temperature: cfg.llm.temperature,
        max_tokens: cfg.llm.max_tokens,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MockRule {
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    contains: Option<String>,
    response: String,
}

/// Reads mock rules: a JSON array of `{"prompt" | "contains", "response"}`.
pub fn load_mock_responder(path: &Path) -> Result<MockResponder, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let rules: Vec<MockRule> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("mock responses {}: {e}", path.display())))?;
    let mut m = MockResponder::new();
    for r in rules {
        m = match (r.prompt, r.contains) {
            (Some(p), None) => m.exact(p, r.response),
            (None, Some(c)) => m.when_contains(c, r.response),
            _ => return Err(CliError::Config("each mock rule needs exactly one of prompt or contains".into())),
        };
    }
    Ok(m)
}

/// The configured chat client. `mock` is used for the mock transport instead
/// of the rules file when given.
pub fn build_client(cfg: &RunConfig, mock: Option<MockResponder>) -> Result<LlmClient, CliError> {
    let params = decoding_params(cfg);
    let llm = &cfg.llm;
    let client = match llm.transport {
        TransportMode::Live => {
            let url = llm
                .base_url
                .clone()
                .ok_or_else(|| CliError::Config("llm.base_url is required for the live transport".into()))?;
            LlmClient::live(
                LiveConfig {
                    max_retries: llm.max_retries,
                    timeout: Duration::from_secs(llm.timeout_s),
                    ..LiveConfig::new(url, llm.api_key.clone())
                },
                params,
            )
        }
        TransportMode::Replay => {
            let path = llm
                .replay
                .as_ref()
                .ok_or_else(|| CliError::Config("llm.replay is required for the replay transport".into()))?;
            if !path.exists() {
                return Err(CliError::Config(format!("replay file {} does not exist", path.display())));
            }
            LlmClient::replay_file(path, params)?
        }
        TransportMode::Mock => {
            let responder = match (mock, &llm.mock_responses) {
                (Some(m), _) => m,
                (None, Some(p)) => load_mock_responder(p)?,
                (None, None) => MockResponder::new(),
            };
            LlmClient::mock(responder, params)
        }
    };
    let client = match &llm.record {
        Some(p) => client.with_recorder(p)?,
        None => client,
    };
    Ok(match llm.rate_limit_rps {
        Some(rps) if rps > 0.0 => client.with_rate_limit(rps),
        Some(_) => return Err(CliError::Config("llm.rate_limit_rps must be positive".into())),
        None => client,
    })
}

fn remote(cfg: &RunConfig, url: &str) -> RemoteEmbedder {
    RemoteEmbedder::new(RemoteEmbedderConfig {
        base_url: url.to_string(),
        model: cfg.embed.model.clone(),
        api_key: cfg.embed.api_key.clone(),
        dim: cfg.embed.dim,
        batch_size: cfg.embed.batch_size,
    })
}

/// The provider used at planning time.
pub fn build_embedder(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    let e = &cfg.embed;
    Ok(match e.provider {
        EmbedProvider::Hash => Box::new(HashEmbedder::new(e.dim, e.seed)),
        EmbedProvider::Remote => Box::new(remote(
            cfg,
            e.base_url
                .as_deref()
                .ok_or_else(|| CliError::Config("embed.base_url is required for the remote provider".into()))?,
        )),
        EmbedProvider::Cache => {
            let path = e
                .cache
                .as_ref()
                .ok_or_else(|| CliError::Config("embed.cache is required for the cache provider".into()))?;
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "embedding cache {} does not exist; run `taskplan embed` first",
                    path.display()
                )));
            }
            let c = FileCacheEmbedder::open(path)?;
            if c.dim() != e.dim {
                return Err(CliError::Config(format!("cache dim {} differs from embed.dim {}", c.dim(), e.dim)));
            }
            Box::new(c)
        }
    })
}

/// The provider that fills the cache: the remote service when a base URL is
/// set, otherwise the hash embedder.
pub fn build_source_embedder(cfg: &RunConfig) -> Box<dyn EmbeddingProvider> {
    match (&cfg.embed.provider, cfg.embed.base_url.as_deref()) {
        (EmbedProvider::Remote | EmbedProvider::Cache, Some(url)) => Box::new(remote(cfg, url)),
        _ => Box::new(HashEmbedder::new(cfg.embed.dim, cfg.embed.seed)),
    }
}

/// The text embedded for a node: its description, or its name when empty.
pub fn node_texts(g: &TaskGraph) -> Vec<String> {
    g.nodes()
        .iter()
        .map(|n| if n.description.trim().is_empty() { n.name.clone() } else { n.description.clone() })
        .collect()
}

pub struct Workspace {
    pub cfg: RunConfig,
    pub graph: TaskGraph,
    pub samples: Vec<PlanSample>,
}

impl Workspace {
    pub fn open(cfg: RunConfig) -> Result<Self, CliError> {
        let graph = load_graph(&cfg.graph)?;
        let samples = match &cfg.samples {
            Some(p) => load_samples(p, &graph)?,
            None => Vec::new(),
        };
        Ok(Self { cfg, graph, samples })
    }

    pub fn example(&self) -> Result<Option<&PlanSample>, CliError> {
        match &self.cfg.example_id {
            None => Ok(None),
            Some(id) => self
                .samples
                .iter()
                .find(|s| &s.id == id)
                .map(Some)
                .ok_or_else(|| CliError::Config(format!("example_id {id:?} is not among the samples"))),
        }
    }

    /// (train, test) according to `[split]`; without it every sample is
    /// both. The in-context example never appears in the test set.
    pub fn split(&self) -> Result<(Vec<PlanSample>, Vec<PlanSample>), CliError> {
        let (train, mut test) = match &self.cfg.split {
            Some(s) => {
                let sp = taskplan_core::corpus::make_split(&self.samples, s.train, s.test, s.seed)?;
                (sp.train, sp.test)
            }
            None => (self.samples.clone(), self.samples.clone()),
        };
        if let Some(id) = &self.cfg.example_id {
            test.retain(|s| &s.id != id);
        }
        Ok((train, test))
    }

    pub fn node_features(&self, embedder: &dyn EmbeddingProvider) -> Result<EmbeddingMatrix, CliError> {
        Ok(embedder.embed_texts(&node_texts(&self.graph))?)
    }

    /// Final node representations scored against step embeddings.
    pub fn node_representations(&self, strategy: Strategy, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix, CliError> {
        match strategy {
            Strategy::Sage | Strategy::Gcn => {
                let arch = if strategy == Strategy::Sage { GnnArch::Sage } else { GnnArch::Gcn };
                let path = self
                    .cfg
                    .gnn
                    .weights
                    .as_ref()
                    .ok_or_else(|| CliError::Config(format!("strategy {strategy} needs gnn.weights")))?;
                let m = GnnModel::load(path)?;
                if m.arch != arch {
                    return Err(CliError::Config(format!(
                        "weights {} hold a {:?} model, not {strategy}",
                        path.display(),
                        m.arch
                    )));
                }
                Ok(GraphContext::new(&self.graph).forward(x, &m)?)
            }
            _ => Ok(sgc_forward(&build_adjacency(&self.graph), x, self.cfg.gnn.k)?),
        }
    }
}

/// Worker count: configured, else the core count, and never more than the
/// rate limit allows to be in flight per second.
pub fn worker_count(cfg: &RunConfig) -> usize {
    let base = if cfg.parallelism > 0 {
        cfg.parallelism
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    };
    match cfg.llm.rate_limit_rps {
        Some(rps) if rps > 0.0 => base.min(rps.ceil() as usize).max(1),
        _ => base.max(1),
    }
}
