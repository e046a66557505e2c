use taskplan_core::corpus::CorpusError;
use taskplan_core::embed::EmbedError;
use taskplan_core::gnn::GnnError;
use taskplan_core::llm::LlmError;
use taskplan_core::metrics::MetricsError;
use taskplan_core::planner::PlanError;
use taskplan_core::taskgraph::GraphError;
use taskplan_core::theory::TheoryError;
use taskplan_core::train::TrainError;
use thiserror::Error;

/// Every failure the CLI reports, grouped by exit code: 1 for configuration,
/// 2 for the LLM or embedding service (including replay misses), 3 for data.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("service: {0}")]
    Service(String),
    #[error("data: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Service(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::MissingSlot { .. } | LlmError::UnknownSlot { .. } => CliError::Config(e.to_string()),
            e if e.is_service() => CliError::Service(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::ServiceUnavailable(_) => CliError::Service(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Llm(e) => e.into(),
            PlanError::Embed(e) => e.into(),
            PlanError::Config(m) => CliError::Config(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Config(m),
            TrainError::Embed(e) => e.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::Llm(e) => e.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(GraphError, CorpusError, GnnError, MetricsError, std::io::Error, serde_json::Error);
