use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use taskplan_core::planner::{SearchConfig, SearchStrategy};
use taskplan_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Direct,
    Sgc,
    Sage,
    Gcn,
    Greedy,
    Adaptive,
    Beam,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::Sgc => "sgc",
            Strategy::Sage => "sage",
            Strategy::Gcn => "gcn",
            Strategy::Greedy => "greedy",
            Strategy::Adaptive => "adaptive",
            Strategy::Beam => "beam",
        }
    }

    pub fn search(self) -> Option<SearchStrategy> {
        match self {
            Strategy::Greedy => Some(SearchStrategy::Greedy),
            Strategy::Adaptive => Some(SearchStrategy::Adaptive),
            Strategy::Beam => Some(SearchStrategy::Beam),
            _ => None,
        }
    }

    pub fn needs_weights(self) -> bool {
        matches!(self, Strategy::Sage | Strategy::Gcn)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase()))
            .map_err(|_| CliError::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Live,
    #[default]
    Replay,
    Mock,
}

impl FromStr for TransportMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(Self::Live),
            "replay" => Ok(Self::Replay),
            "mock" => Ok(Self::Mock),
            _ => Err(CliError::Config(format!("unknown transport {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub transport: TransportMode,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    /// Recorded exchanges for the replay transport.
    pub replay: Option<PathBuf>,
    /// Appends every exchange to this JSONL file.
    pub record: Option<PathBuf>,
    /// JSON list of `{"contains": ..., "response": ...}` rules for the mock
    /// transport; prompts matching no rule get `{}`.
    pub mock_responses: Option<PathBuf>,
    pub rate_limit_rps: Option<f64>,
    pub max_retries: u32,
    pub timeout_s: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        let p = taskplan_core::llm::DecodingParams::default();
        Self {
            transport: TransportMode::Replay,
            model: p.model,
            temperature: p.temperature,
            max_tokens: p.max_tokens,
            base_url: None,
            api_key: None,
            replay: None,
            record: None,
            mock_responses: None,
            rate_limit_rps: None,
            max_retries: 5,
            timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedProvider {
    #[default]
    Hash,
    Cache,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    pub provider: EmbedProvider,
    pub dim: usize,
    /// Seed of the hash embedder.
    pub seed: u64,
    /// `EMB1` file read by the cache provider and written by `embed`.
    pub cache: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: String,
    pub api_key: Option<String>,
    pub batch_size: usize,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self {
            provider: EmbedProvider::Hash,
            dim: 64,
            seed: 0,
            cache: None,
            base_url: None,
            model: "e5-large".into(),
            api_key: None,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnSettings {
    /// Propagation steps for SGC.
    pub k: usize,
    /// Trained weights for sage / gcn, written by `train`.
    pub weights: Option<PathBuf>,
    pub layers: usize,
    /// Output dimension of trained models; defaults to the embedding dim.
    pub dim_out: Option<usize>,
    /// Textually nearest negatives per positive when building triplets.
    pub negatives: usize,
    /// Train the model before evaluating when no weights file exists.
    pub train_first: bool,
}

impl Default for GnnSettings {
    fn default() -> Self {
        Self {
            k: 1,
            weights: None,
            layers: 1,
            dim_out: None,
            negatives: 2,
            train_first: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSettings {
    pub train: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub samples: Option<PathBuf>,
    pub strategy: Strategy,
    /// Strategies for `eval`; defaults to `[strategy]`.
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub parallelism: usize,
    /// Sample id used as the in-context example in every prompt.
    pub example_id: Option<String>,
    pub fill_parameters: bool,
    pub split: Option<SplitSettings>,
    pub llm: LlmSettings,
    pub embed: EmbedSettings,
    pub gnn: GnnSettings,
    pub search: SearchConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph: PathBuf::from("graph.json"),
            samples: None,
            strategy: Strategy::Sgc,
            strategies: Vec::new(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            parallelism: 0,
            example_id: None,
            fill_parameters: false,
            split: None,
            llm: LlmSettings::default(),
            embed: EmbedSettings::default(),
            gnn: GnnSettings::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Replaces every `${NAME}` with the value of the environment variable
/// `NAME` looked up through `env`.
pub fn interpolate(text: &str, env: &dyn Fn(&str) -> Option<String>) -> Result<String, CliError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| CliError::Config(format!("unterminated ${{ in {text:?}")))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(CliError::Config(format!("bad variable name {name:?}")));
        }
        let value = env(name).ok_or_else(|| CliError::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut toml::Value, env: &dyn Fn(&str) -> Option<String>) -> Result<(), CliError> {
    match v {
        toml::Value::String(s) => *s = interpolate(s, env)?,
        toml::Value::Array(items) => {
            for item in items {
                interpolate_value(item, env)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, item) in t.iter_mut() {
                interpolate_value(item, env)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML, interpolates string values, and resolves relative paths
    /// against `base`.
    pub fn from_toml_str(
        text: &str,
        base: &Path,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        interpolate_value(&mut value, env)?;
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, &|k| std::env::var(k).ok())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.graph);
        fix(&mut self.out_dir);
        for p in [
            &mut self.samples,
            &mut self.llm.replay,
            &mut self.llm.record,
            &mut self.llm.mock_responses,
            &mut self.embed.cache,
            &mut self.gnn.weights,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn eval_strategies(&self) -> Vec<Strategy> {
        if self.strategies.is_empty() {
            vec![self.strategy]
        } else {
            self.strategies.clone()
        }
    }

    pub fn model_dim_out(&self) -> usize {
        self.gnn.dim_out.unwrap_or(self.embed.dim)
    }

    pub fn search_for(&self, s: SearchStrategy) -> SearchConfig {
        SearchConfig { strategy: s, ..self.search.clone() }
    }

    /// Checks the fields that `strategies` will need.
    pub fn validate(&self, strategies: &[Strategy], needs_llm: bool) -> Result<(), CliError> {
        let missing = |what: &str, p: &Path| CliError::Config(format!("{what} {} does not exist", p.display()));
        if !self.graph.exists() {
            return Err(missing("graph file", &self.graph));
        }
        if let Some(s) = &self.samples {
            if !s.exists() {
                return Err(missing("samples file", s));
            }
        }
        if self.embed.dim == 0 {
            return Err(CliError::Config("embed.dim must be positive".into()));
        }
        match self.embed.provider {
            EmbedProvider::Cache if self.embed.cache.is_none() => {
                return Err(CliError::Config("embed.provider = \"cache\" needs embed.cache".into()))
            }
            EmbedProvider::Remote if self.embed.base_url.is_none() => {
                return Err(CliError::Config("embed.provider = \"remote\" needs embed.base_url".into()))
            }
            _ => {}
        }
        for s in strategies {
            if s.needs_weights() {
                match &self.gnn.weights {
                    None => return Err(CliError::Config(format!("strategy {s} needs gnn.weights"))),
                    Some(w) if !w.exists() && !self.gnn.train_first => {
                        return Err(CliError::Config(format!(
                            "strategy {s}: weights {} missing and gnn.train_first is off",
                            w.display()
                        )))
                    }
                    _ => {}
                }
            }
        }
        if needs_llm {
            match self.llm.transport {
                TransportMode::Replay => match &self.llm.replay {
                    None => return Err(CliError::Config("llm.transport = \"replay\" needs llm.replay".into())),
                    Some(p) if !p.exists() => return Err(missing("replay file", p)),
                    _ => {}
                },
                TransportMode::Live if self.llm.base_url.is_none() => {
                    return Err(CliError::Config("llm.transport = \"live\" needs llm.base_url".into()))
                }
                TransportMode::Mock => {
                    if let Some(p) = &self.llm.mock_responses {
                        if !p.exists() {
                            return Err(missing("mock responses file", p));
                        }
                    }
                }
                _ => {}
            }
        }
        self.search
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(k: &str) -> Option<String> {
        (k == "API_KEY").then(|| "sk-test".to_string())
    }

    #[test]
    fn interpolation() {
        assert_eq!(interpolate("a ${API_KEY} b", &env).unwrap(), "a sk-test b");
        assert_eq!(interpolate("plain", &env).unwrap(), "plain");
        assert!(interpolate("${MISSING}", &env).is_err());
        assert!(interpolate("${API_KEY", &env).is_err());
    }

    #[test]
    fn parses_sections_and_resolves_paths() {
        let text = r#"
            graph = "g.json"
            samples = "/abs/s.jsonl"
            strategy = "beam"
            strategies = ["direct", "sgc"]
            [llm]
            transport = "live"
            base_url = "http://localhost:1234"
            api_key = "${API_KEY}"
            [embed]
            dim = 8
            [search]
            beam_width = 3
            [train]
            epochs = 4
        "#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/base"), &env).unwrap();
        assert_eq!(cfg.graph, PathBuf::from("/base/g.json"));
        assert_eq!(cfg.samples, Some(PathBuf::from("/abs/s.jsonl")));
        assert_eq!(cfg.strategy, Strategy::Beam);
        assert_eq!(cfg.eval_strategies(), vec![Strategy::Direct, Strategy::Sgc]);
        assert_eq!(cfg.llm.api_key.as_deref(), Some("sk-test"));
        assert_eq!(cfg.search.beam_width, 3);
        assert_eq!(cfg.search.threshold, 3);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model_dim_out(), 8);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml_str("grpah = \"x\"", Path::new("."), &env).is_err());
        assert!(RunConfig::from_toml_str("[llm]\nmodle = \"x\"", Path::new("."), &env).is_err());
    }

    #[test]
    fn strategy_names() {
        assert_eq!("SGC".parse::<Strategy>().unwrap(), Strategy::Sgc);
        assert!("gat".parse::<Strategy>().is_err());
        assert_eq!(Strategy::Adaptive.to_string(), "adaptive");
    }
}
