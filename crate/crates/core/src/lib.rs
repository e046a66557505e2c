//! Graph-grounded task planning for LLM agents.
//!
//! A user request is decomposed into steps by an LLM, and each step is then
//! matched to a node of a text-attributed task graph by scoring final node
//! embeddings against the step embedding. Decoding is restricted to graph
//! neighbors, so retrieved plans never name a task or dependency that is
//! missing from the graph.
//!
//! Crate layout:
//!
//! - [`taskgraph`]: the task graph itself, loading, membership and relabeling.
//! - [`corpus`]: planning samples, splits and BPR training triplets.
//! - [`embed`]: embedding providers, the `EMB1` cache format and similarity.
//! - [`gnn`]: SGC, GCN and GraphSAGE forward passes and the `GNN1` weight format.
//! - [`train`]: BPR loss, analytic gradients, Adam and gradient checking.
//! - [`llm`]: prompt templates, chat transports and response parsing.
//! - [`planner`]: direct inference, GNN retrieval, GraphSearch and parameter filling.
//! - [`metrics`]: n-F1, l-F1, accuracy, hallucination ratios and reports.
//! - [`theory`]: the edge-list dynamic program, its classic instances and the
//!   frequency-logit analysis of next-token training on paths.

pub mod corpus;
pub mod embed;
pub mod gnn;
pub mod llm;
pub mod metrics;
pub mod planner;
pub mod taskgraph;
pub mod theory;
pub mod train;

mod fsutil;

pub use fsutil::write_atomic;

pub use corpus::{PlanSample, Split, TrainTriplet};
pub use embed::{EmbeddingMatrix, EmbeddingProvider};
pub use gnn::{GnnArch, GnnModel, NormalizedAdjacency};
pub use llm::{LlmClient, LlmExchange};
pub use metrics::{Report, SampleScore};
pub use planner::Plan;
pub use taskgraph::TaskGraph;
