//! Command-line runner for graph-grounded task planning: loads a TOML run
//! configuration and drives embedding, training, planning, evaluation and
//! the theory suites.

pub mod commands;
pub mod config;
pub mod error;
pub mod runtime;
pub mod suites;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_embed, cmd_eval, cmd_plan, cmd_train};
pub use config::{RunConfig, Strategy, TransportMode};
pub use error::CliError;
pub use suites::{cmd_theory, Suite};

#[derive(Debug, Parser)]
#[command(name = "taskplan", version, about = "Graph-grounded task planning experiments")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Strategy, or a comma list of strategies for eval.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Seed for splits, initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// live, replay or mock.
    #[arg(long, global = true)]
    pub transport: Option<String>,
    /// Append every LLM exchange to this JSONL file.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed node descriptions and sample steps into the embedding cache.
    Embed,
    /// Train SAGE or GCN weights with the BPR objective.
    Train,
    /// Plan one request and print the plan JSON.
    Plan { request: String },
    /// Evaluate every configured strategy on the test split.
    Eval,
    /// Run a theory suite: dp, logits or permute.
    Theory { suite: String },
}

impl Cli {
    /// The file configuration with flag overrides applied.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.strategy {
            let parsed: Vec<Strategy> = s.split(',').map(str::parse).collect::<Result<_, _>>()?;
            cfg.strategy = parsed[0];
            cfg.strategies = parsed;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = &self.transport {
            cfg.llm.transport = t.parse()?;
        }
        if let Some(r) = &self.record {
            cfg.llm.record = Some(r.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

/// Runs the parsed command and returns what goes to stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Embed => {
            let s = cmd_embed(cfg)?;
            Ok(format!("embedded {} texts (dim {}) into {}", s.texts, s.dim, s.path.display()))
        }
        Command::Train => {
            let r = cmd_train(cfg)?;
            Ok(format!(
                "trained {} epochs on {} triplets, best epoch {}",
                r.epoch_losses.len(),
                r.train_triplets,
                r.best_epoch + 1
            ))
        }
        Command::Plan { request } => Ok(serde_json::to_string_pretty(&cmd_plan(cfg, request)?)?),
        Command::Eval => {
            let out = cmd_eval(cfg)?;
            Ok(out.files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join("\n"))
        }
        Command::Theory { suite } => {
            let suite: Suite = suite.parse()?;
            let r = cmd_theory(cfg, suite)?;
            Ok(serde_json::to_string_pretty(&r)?)
        }
    }
}
