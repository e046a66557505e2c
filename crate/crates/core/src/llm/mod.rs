//! Prompt templates, chat transports and response parsing.

mod client;
mod parse;
mod template;

use thiserror::Error;

pub use client::{
    replay_key, DecodingParams, LiveConfig, LlmClient, LlmExchange, MockResponder, Record, ReplayStore,
    TransportKind, Usage,
};
pub use parse::{
    extract_json_object, parse_best_solution, parse_parameter_nodes, parse_plan_json, parse_score_dict,
    parse_steps,
};
pub use template::{slot, slots, PromptTemplate, TemplateName};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template {template} has no value for slot {slot:?}")]
    MissingSlot { template: TemplateName, slot: String },
    #[error("template {template} has no slot {slot:?}")]
    UnknownSlot { template: TemplateName, slot: String },
    #[error("LLM service error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Service { status: Option<u16>, message: String },
    #[error("no recorded exchange for key {key}")]
    ReplayMiss { key: String },
    #[error("unusable LLM output: {0}")]
    ParseFailure(String),
    #[error("recording file: {0}")]
    Recording(String),
}

impl LlmError {
    /// Errors that come from the transport rather than the content.
    pub fn is_service(&self) -> bool {
        matches!(self, LlmError::Service { .. } | LlmError::ReplayMiss { .. } | LlmError::Recording(_))
    }
}
