//! Planning strategies: direct LLM inference, GNN retrieval, LLM-scored
//! graph search, and parameter filling.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Argument, PlanSample};
use crate::embed::{dot_scores, EmbedError, EmbeddingMatrix, EmbeddingProvider};
use crate::llm::{
    parse_best_solution, parse_parameter_nodes, parse_plan_json, parse_score_dict, parse_steps, slot, slots, LlmClient,
    LlmError, LlmExchange, PromptTemplate, TemplateName, Usage,
};
use crate::taskgraph::{NodeId, TaskGraph};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("final embeddings have {rows} rows for {nodes} nodes")]
    EmbeddingShape { rows: usize, nodes: usize },
    #[error("step decomposition returned no steps")]
    EmptyDecomposition { exchange: Box<LlmExchange> },
    #[error("step decomposition was unusable: {message}")]
    DecompositionParse { message: String, exchange: Box<LlmExchange> },
    #[error("invalid search config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum PlanFlag {
    /// The LLM output of a stage could not be parsed.
    ParseFailure { stage: String, message: String },
    /// Decomposition produced no steps.
    EmptyDecomposition,
    /// Retrieval at `step` found no out-neighbors and fell back to all nodes.
    DeadEnd { step: usize },
    /// A search path stopped early because its last node has no successors.
    SearchDeadEnd { depth: usize },
    /// Assessment scores defaulted to 1 because the response was unusable.
    DefaultScores { depth: usize },
    /// The path-selection answer was not one of the searched paths.
    InvalidSelection,
    /// The adaptive frontier was truncated to the configured cap.
    FrontierCapped { depth: usize, dropped: usize },
    /// Parameter filling returned a different task list than planned.
    AlignmentWarning { planned: usize, returned: usize },
}

/// Planner output, also used to hold parsed LLM plans.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<String>,
    pub nodes: Vec<String>,
    pub links: Vec<(String, String)>,
    pub arguments: Option<Vec<Vec<Argument>>>,
    pub hallucinated_nodes: Vec<String>,
    pub hallucinated_links: Vec<(String, String)>,
    pub exchanges: Vec<LlmExchange>,
    pub failed: bool,
    pub flags: Vec<PlanFlag>,
}

impl Plan {
    fn failed_with(flag: PlanFlag, exchanges: Vec<LlmExchange>) -> Self {
        Self {
            failed: true,
            flags: vec![flag],
            exchanges,
            ..Self::default()
        }
    }

    /// Recomputes the hallucination lists against `g`.
    pub fn mark_hallucinations(&mut self, g: &TaskGraph) {
        let mut seen = HashSet::new();
        self.hallucinated_nodes = self
            .nodes
            .iter()
            .filter(|n| !g.contains_node(n) && seen.insert(n.as_str()))
            .cloned()
            .collect();
        self.hallucinated_links = self
            .links
            .iter()
            .filter(|(s, t)| !g.contains_edge(s, t))
            .cloned()
            .collect();
    }

    pub fn token_usage(&self) -> Usage {
        self.exchanges.iter().fold(Usage::default(), |acc, e| Usage {
            prompt_tokens: acc.prompt_tokens + e.usage.prompt_tokens,
            completion_tokens: acc.completion_tokens + e.usage.completion_tokens,
        })
    }

    pub fn llm_calls(&self) -> usize {
        self.exchanges.len()
    }

    /// The dataset record shape plus hallucination and token fields.
    pub fn to_json(&self) -> serde_json::Value {
        let usage = self.token_usage();
        let nodes: Vec<serde_json::Value> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let args = self.arguments.as_ref().and_then(|a| a.get(i)).cloned().unwrap_or_default();
                serde_json::json!({ "task": n, "arguments": args })
            })
            .collect();
        serde_json::json!({
            "task_steps": self.steps,
            "task_nodes": nodes,
            "task_links": self.links.iter()
                .map(|(s, t)| serde_json::json!({"source": s, "target": t}))
                .collect::<Vec<_>>(),
            "hallucinated_nodes": self.hallucinated_nodes,
            "hallucinated_links": self.hallucinated_links.iter()
                .map(|(s, t)| serde_json::json!({"source": s, "target": t}))
                .collect::<Vec<_>>(),
            "token_usage": {
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
                "total_tokens": usage.total(),
                "llm_calls": self.exchanges.len(),
            },
            "failed": self.failed,
            "flags": self.flags,
        })
    }

    fn from_path(g: &TaskGraph, steps: &[String], path: &[NodeId]) -> Self {
        let nodes: Vec<String> = path.iter().map(|&v| g.name(v).to_string()).collect();
        let links = nodes.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
        let mut plan = Plan {
            steps: steps.to_vec(),
            nodes,
            links,
            ..Plan::default()
        };
        plan.mark_hallucinations(g);
        plan
    }
}

/// Prompt inputs shared by every request on one graph.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub task_list: String,
    pub direct_example: String,
    pub steps_example: String,
    pub assessment_example: String,
    pub parameter_example: String,
    /// Template used for decomposition: `steps_only`, or `direct_inference`
    /// with nodes and links discarded.
    pub decomposition: TemplateName,
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string(v).expect("json")
}

fn task_subset_json(g: &TaskGraph, ids: &[NodeId]) -> String {
    let items: Vec<serde_json::Value> = ids
        .iter()
        .map(|&v| serde_json::json!({ "id": g.name(v), "desc": g.nodes()[v].description }))
        .collect();
    pretty(&serde_json::Value::Array(items))
}

impl PromptContext {
    /// Builds the in-context examples from `example`, when given.
    pub fn new(g: &TaskGraph, example: Option<&PlanSample>) -> Self {
        let templates = TemplateName::ALL
            .iter()
            .map(|&n| (n, PromptTemplate::bundled(n)))
            .collect();
        let mut ctx = Self {
            task_list: g.task_list_json(),
            direct_example: String::new(),
            steps_example: String::new(),
            assessment_example: String::new(),
            parameter_example: String::new(),
            decomposition: TemplateName::StepsOnly,
            templates,
        };
        if let Some(ex) = example {
            let record = ex.to_record();
            let nodes: Vec<serde_json::Value> = record["task_nodes"]
                .as_array()
                .cloned()
                .unwrap_or_default()
                .into_iter()
                .map(|mut n| {
                    if n.get("arguments").is_none() {
                        n["arguments"] = serde_json::json!([]);
                    }
                    n
                })
                .collect();
            let full = serde_json::json!({
                "task_steps": record["task_steps"],
                "task_nodes": nodes,
                "task_links": record["task_links"],
            });
            ctx.direct_example = format!("# USER REQUEST #\n{}\n# RESULT #\n{}", ex.request, pretty(&full));
            ctx.steps_example = format!(
                "# USER REQUEST #\n{}\n# RESULT #\n{}",
                ex.request,
                pretty(&serde_json::json!({ "task_steps": ex.steps }))
            );
            if let (Some(step), Some(target)) = (ex.steps.first(), ex.gt_nodes.first()) {
                let scores: serde_json::Map<String, serde_json::Value> = ex
                    .gt_nodes
                    .iter()
                    .map(|n| (n.clone(), serde_json::json!(if n == target { 5 } else { 1 })))
                    .collect();
                let cands: Vec<NodeId> = ex.gt_nodes.iter().filter_map(|n| g.id_of(n)).collect();
                ctx.assessment_example = format!(
                    "# CANDIDATE TASK LIST #\n{}\n# STEP #\n{}\n# RESULT #\n{}",
                    task_subset_json(g, &cands),
                    step,
                    pretty(&serde_json::Value::Object(scores))
                );
            }
            ctx.parameter_example = format!(
                "# USER REQUEST #\n{}\n# PLANNED TASKS #\n{}\n# RESULT #\n{}",
                ex.request,
                pretty(&serde_json::json!(ex.gt_nodes)),
                pretty(&serde_json::json!({ "task_nodes": full["task_nodes"] }))
            );
        }
        ctx
    }

    pub fn with_template(mut self, t: PromptTemplate) -> Self {
        self.templates.insert(t.name, t);
        self
    }

    pub fn template(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn direct_prompt(&self, request: &str) -> Result<String, LlmError> {
        self.template(TemplateName::DirectInference).render(&slots([
            (slot::TASK_LIST, self.task_list.clone()),
            (slot::EXAMPLES, self.direct_example.clone()),
            (slot::USER_REQUEST, request.to_string()),
        ]))
    }

    pub fn decomposition_prompt(&self, request: &str) -> Result<String, LlmError> {
        match self.decomposition {
            TemplateName::DirectInference => self.direct_prompt(request),
            _ => self.template(TemplateName::StepsOnly).render(&slots([
                (slot::TASK_LIST, self.task_list.clone()),
                (slot::EXAMPLES, self.steps_example.clone()),
                (slot::USER_REQUEST, request.to_string()),
            ])),
        }
    }

    pub fn assessment_prompt(&self, g: &TaskGraph, candidates: &[NodeId], step: &str) -> Result<String, LlmError> {
        self.template(TemplateName::TaskAssessment).render(&slots([
            (slot::CANDIDATE_TASKS, task_subset_json(g, candidates)),
            (slot::EXAMPLES, self.assessment_example.clone()),
            (slot::STEP_DESCRIPTION, step.to_string()),
        ]))
    }

    pub fn selection_prompt(&self, request: &str, steps: &[String], solutions: &[Vec<String>]) -> Result<String, LlmError> {
        self.template(TemplateName::PathSelection).render(&slots([
            (slot::TASK_LIST, self.task_list.clone()),
            (slot::USER_REQUEST, request.to_string()),
            (slot::STEPS, pretty(&serde_json::json!(steps))),
            (slot::SOLUTIONS, pretty(&serde_json::json!(solutions))),
        ]))
    }

    pub fn parameter_prompt(&self, g: &TaskGraph, request: &str, planned: &[String]) -> Result<String, LlmError> {
        let ids: Vec<NodeId> = planned.iter().filter_map(|n| g.id_of(n)).collect();
        self.template(TemplateName::ParameterFill).render(&slots([
            (slot::USER_REQUEST, request.to_string()),
            (slot::PLANNED_TASKS, pretty(&serde_json::json!(planned))),
            (slot::TASK_DETAILS, task_subset_json(g, &ids)),
            (slot::EXAMPLES, self.parameter_example.clone()),
        ]))
    }
}

/// One LLM call with the direct-inference prompt. Unparseable output gives
/// an empty plan marked failed.
pub fn plan_direct(request: &str, g: &TaskGraph, client: &LlmClient, prompts: &PromptContext) -> Result<Plan, PlanError> {
    let prompt = prompts.direct_prompt(request)?;
    let ex = client.chat(&prompt)?;
    Ok(match parse_plan_json(&ex.response, g) {
        Ok(mut plan) => {
            plan.exchanges.push(ex);
            plan
        }
        Err(e) => Plan::failed_with(
            PlanFlag::ParseFailure {
                stage: "direct".into(),
                message: e.to_string(),
            },
            vec![ex],
        ),
    })
}

/// One LLM call that breaks the request into steps.
pub fn decompose_steps(
    request: &str,
    client: &LlmClient,
    prompts: &PromptContext,
) -> Result<(Vec<String>, LlmExchange), PlanError> {
    let prompt = prompts.decomposition_prompt(request)?;
    let ex = client.chat(&prompt)?;
    match parse_steps(&ex.response) {
        Ok(steps) if steps.iter().any(|s| !s.trim().is_empty()) => {
            Ok((steps.into_iter().filter(|s| !s.trim().is_empty()).collect(), ex))
        }
        Ok(_) => Err(PlanError::EmptyDecomposition { exchange: Box::new(ex) }),
        Err(e) => Err(PlanError::DecompositionParse {
            message: e.to_string(),
            exchange: Box::new(ex),
        }),
    }
}

fn argmax(scores: &[(NodeId, f64)]) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for &(v, s) in scores {
        match best {
            Some((bv, bs)) if s < bs || (s == bs && v > bv) => {}
            _ => best = Some((v, s)),
        }
    }
    best.map(|(v, _)| v)
}

/// Path decoding from pre-computed step embeddings: the first node is the
/// global argmax, each later node the argmax over out-neighbors of the
/// previous one. Returns the path and the steps that hit a dead end.
pub fn decode_path(g: &TaskGraph, h: &EmbeddingMatrix, step_embeddings: &EmbeddingMatrix) -> Result<(Vec<NodeId>, Vec<usize>), PlanError> {
    if h.rows() != g.node_count() {
        return Err(PlanError::EmbeddingShape {
            rows: h.rows(),
            nodes: g.node_count(),
        });
    }
    let all: Vec<NodeId> = (0..g.node_count()).collect();
    let mut path: Vec<NodeId> = Vec::with_capacity(step_embeddings.rows());
    let mut dead_ends = Vec::new();
    for i in 0..step_embeddings.rows() {
        let x = step_embeddings.row(i);
        let candidates = match path.last() {
            None => all.as_slice(),
            Some(&prev) => {
                let n = g.neighbors(prev).expect("valid id");
                if n.is_empty() {
                    dead_ends.push(i);
                    all.as_slice()
                } else {
                    n
                }
            }
        };
        let scores = dot_scores(h, x, candidates)?;
        path.push(argmax(&scores).expect("candidates non-empty"));
    }
    Ok((path, dead_ends))
}

/// GNN retrieval for already decomposed steps.
pub fn retrieve_path(
    steps: &[String],
    g: &TaskGraph,
    h: &EmbeddingMatrix,
    step_embedder: &dyn EmbeddingProvider,
) -> Result<Plan, PlanError> {
    if steps.is_empty() {
        return Ok(Plan::default());
    }
    let x = step_embedder.embed_texts(steps)?;
    let (path, dead_ends) = decode_path(g, h, &x)?;
    let mut plan = Plan::from_path(g, steps, &path);
    // A dead-end jump is not an edge of the graph, so it gets no link.
    if !dead_ends.is_empty() {
        plan.links = path
            .windows(2)
            .enumerate()
            .filter(|(i, _)| !dead_ends.contains(&(i + 1)))
            .map(|(_, w)| (g.name(w[0]).to_string(), g.name(w[1]).to_string()))
            .collect();
        plan.mark_hallucinations(g);
    }
    plan.flags.extend(dead_ends.into_iter().map(|step| PlanFlag::DeadEnd { step }));
    Ok(plan)
}

/// Decomposition followed by retrieval; one LLM call in total.
pub fn plan_with_retrieval(
    request: &str,
    g: &TaskGraph,
    client: &LlmClient,
    prompts: &PromptContext,
    h: &EmbeddingMatrix,
    step_embedder: &dyn EmbeddingProvider,
) -> Result<Plan, PlanError> {
    match decompose_steps(request, client, prompts) {
        Ok((steps, ex)) => {
            let mut plan = retrieve_path(&steps, g, h, step_embedder)?;
            plan.exchanges.insert(0, ex);
            Ok(plan)
        }
        Err(PlanError::EmptyDecomposition { exchange }) => Ok(Plan::failed_with(PlanFlag::EmptyDecomposition, vec![*exchange])),
        Err(PlanError::DecompositionParse { message, exchange }) => Ok(Plan::failed_with(
            PlanFlag::ParseFailure {
                stage: "decomposition".into(),
                message,
            },
            vec![*exchange],
        )),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    Greedy,
    Adaptive,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step1Candidates {
    AllNodes,
    TopMByEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub strategy: SearchStrategy,
    pub threshold: u8,
    pub beam_width: usize,
    pub step1_candidates: Step1Candidates,
    pub m: usize,
    /// Upper bound on adaptive frontier size; lowest cumulative scores are
    /// dropped first.
    pub max_frontier: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            strategy: SearchStrategy::Greedy,
            threshold: 3,
            beam_width: 2,
            step1_candidates: Step1Candidates::AllNodes,
            m: 20,
            max_frontier: 32,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(1..=5).contains(&self.threshold) {
            return Err(PlanError::Config("threshold must be in 1..=5".into()));
        }
        if self.beam_width == 0 || self.max_frontier == 0 || self.m == 0 {
            return Err(PlanError::Config("beam_width, max_frontier and m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Partial {
    nodes: Vec<NodeId>,
    score: u32,
    dead: bool,
}

/// Stable sort by cumulative score, highest first.
fn rank(paths: &mut [Partial]) {
    paths.sort_by_key(|p| std::cmp::Reverse(p.score));
}

/// Retrieval context needed for `top_m_by_embedding` step-1 candidates.
pub struct EmbeddingRanker<'a> {
    pub h: &'a EmbeddingMatrix,
    pub embedder: &'a dyn EmbeddingProvider,
}

/// LLM-scored search over the graph, one depth per step.
#[allow(clippy::too_many_arguments)]
pub fn graph_search(
    request: &str,
    steps: &[String],
    g: &TaskGraph,
    client: &LlmClient,
    prompts: &PromptContext,
    cfg: &SearchConfig,
    ranker: Option<&EmbeddingRanker>,
) -> Result<Plan, PlanError> {
    cfg.validate()?;
    let mut exchanges = Vec::new();
    let mut flags = Vec::new();
    if steps.is_empty() {
        return Ok(Plan::default());
    }
    let step1: Vec<NodeId> = match cfg.step1_candidates {
        Step1Candidates::AllNodes => (0..g.node_count()).collect(),
        Step1Candidates::TopMByEmbedding => {
            let r = ranker.ok_or_else(|| PlanError::Config("top_m_by_embedding needs embeddings".into()))?;
            let x = r.embedder.embed_one(&steps[0])?;
            let mut scores = dot_scores(r.h, &x, &(0..g.node_count()).collect::<Vec<_>>())?;
            scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut top: Vec<NodeId> = scores.into_iter().take(cfg.m).map(|(v, _)| v).collect();
            top.sort_unstable();
            top
        }
    };

    let mut frontier = vec![Partial {
        nodes: Vec::new(),
        score: 0,
        dead: false,
    }];
    for (depth, step) in steps.iter().enumerate() {
        let mut next = Vec::new();
        for p in frontier {
            if p.dead {
                next.push(p);
                continue;
            }
            let candidates: Vec<NodeId> = match p.nodes.last() {
                None => step1.clone(),
                Some(&last) => g.neighbors(last).expect("valid id").to_vec(),
            };
            if candidates.is_empty() {
                flags.push(PlanFlag::SearchDeadEnd { depth });
                next.push(Partial { dead: true, ..p });
                continue;
            }
            let prompt = prompts.assessment_prompt(g, &candidates, step)?;
            let ex = client.chat(&prompt)?;
            let names: Vec<String> = candidates.iter().map(|&v| g.name(v).to_string()).collect();
            let scores: Vec<u8> = match parse_score_dict(&ex.response, &names) {
                Ok(map) => names.iter().map(|n| map[n]).collect(),
                Err(_) => {
                    flags.push(PlanFlag::DefaultScores { depth });
                    vec![1; names.len()]
                }
            };
            exchanges.push(ex);
            let best = (0..candidates.len())
                .max_by(|&a, &b| scores[a].cmp(&scores[b]).then(b.cmp(&a)))
                .expect("non-empty");
            let keep: Vec<usize> = match cfg.strategy {
                SearchStrategy::Greedy => vec![best],
                SearchStrategy::Adaptive => {
                    let above: Vec<usize> = (0..candidates.len()).filter(|&i| scores[i] >= cfg.threshold).collect();
                    if above.is_empty() {
                        vec![best]
                    } else {
                        above
                    }
                }
                SearchStrategy::Beam => (0..candidates.len()).collect(),
            };
            for i in keep {
                let mut nodes = p.nodes.clone();
                nodes.push(candidates[i]);
                next.push(Partial {
                    nodes,
                    score: p.score + scores[i] as u32,
                    dead: false,
                });
            }
        }
        match cfg.strategy {
            SearchStrategy::Greedy => {}
            SearchStrategy::Adaptive => {
                if next.len() > cfg.max_frontier {
                    rank(&mut next);
                    flags.push(PlanFlag::FrontierCapped {
                        depth,
                        dropped: next.len() - cfg.max_frontier,
                    });
                    next.truncate(cfg.max_frontier);
                }
            }
            SearchStrategy::Beam => {
                rank(&mut next);
                next.truncate(cfg.beam_width);
            }
        }
        frontier = next;
    }

    let chosen = if frontier.len() == 1 {
        frontier.pop().expect("one path")
    } else {
        let solutions: Vec<Vec<String>> = frontier
            .iter()
            .map(|p| p.nodes.iter().map(|&v| g.name(v).to_string()).collect())
            .collect();
        let prompt = prompts.selection_prompt(request, steps, &solutions)?;
        let ex = client.chat(&prompt)?;
        let pick = parse_best_solution(&ex.response)
            .ok()
            .and_then(|answer| solutions.iter().position(|s| *s == answer));
        exchanges.push(ex);
        match pick {
            Some(i) => frontier.swap_remove(i),
            None => {
                flags.push(PlanFlag::InvalidSelection);
                rank(&mut frontier);
                frontier.swap_remove(0)
            }
        }
    };
    let mut plan = Plan::from_path(g, steps, &chosen.nodes);
    plan.exchanges = exchanges;
    plan.flags = flags;
    Ok(plan)
}

/// Decomposition followed by graph search.
#[allow(clippy::too_many_arguments)]
pub fn plan_with_search(
    request: &str,
    g: &TaskGraph,
    client: &LlmClient,
    prompts: &PromptContext,
    cfg: &SearchConfig,
    ranker: Option<&EmbeddingRanker>,
) -> Result<Plan, PlanError> {
    match decompose_steps(request, client, prompts) {
        Ok((steps, ex)) => {
            let mut plan = graph_search(request, &steps, g, client, prompts, cfg, ranker)?;
            plan.exchanges.insert(0, ex);
            Ok(plan)
        }
        Err(PlanError::EmptyDecomposition { exchange }) => Ok(Plan::failed_with(PlanFlag::EmptyDecomposition, vec![*exchange])),
        Err(PlanError::DecompositionParse { message, exchange }) => Ok(Plan::failed_with(
            PlanFlag::ParseFailure {
                stage: "decomposition".into(),
                message,
            },
            vec![*exchange],
        )),
        Err(e) => Err(e),
    }
}

/// One LLM call that fills invocation arguments for the planned tasks.
pub fn fill_parameters(
    request: &str,
    mut plan: Plan,
    g: &TaskGraph,
    client: &LlmClient,
    prompts: &PromptContext,
) -> Result<Plan, PlanError> {
    if plan.nodes.is_empty() {
        return Ok(plan);
    }
    let prompt = prompts.parameter_prompt(g, request, &plan.nodes)?;
    let ex = client.chat(&prompt)?;
    let parsed = parse_parameter_nodes(&ex.response);
    plan.exchanges.push(ex);
    let returned = match parsed {
        Ok(r) => r,
        Err(e) => {
            plan.flags.push(PlanFlag::ParseFailure {
                stage: "parameters".into(),
                message: e.to_string(),
            });
            return Ok(plan);
        }
    };
    let aligned = returned.len() == plan.nodes.len();
    if !aligned {
        plan.flags.push(PlanFlag::AlignmentWarning {
            planned: plan.nodes.len(),
            returned: returned.len(),
        });
    }
    let args = if aligned {
        returned.into_iter().map(|(_, a)| a).collect()
    } else {
        let mut used = vec![false; returned.len()];
        plan.nodes
            .iter()
            .map(|n| {
                match (0..returned.len()).find(|&i| !used[i] && returned[i].0 == *n) {
                    Some(i) => {
                        used[i] = true;
                        returned[i].1.clone()
                    }
                    None => Vec::new(),
                }
            })
            .collect()
    };
    plan.arguments = Some(args);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{DecodingParams, MockResponder};
    use crate::taskgraph::LinkKind;

    fn star() -> TaskGraph {
        // c -> a, c -> b
        TaskGraph::from_parts(
            [("a", "alpha"), ("b", "beta"), ("c", "center")],
            [("c", "a", LinkKind::Resource), ("c", "b", LinkKind::Resource)],
        )
        .unwrap()
    }

    #[test]
    fn decode_star_graph() {
        let g = star();
        let h = EmbeddingMatrix::identity(3);
        // step 1 aligns with c, step 2 with b.
        let steps = EmbeddingMatrix::from_rows(&[vec![0.1, 0.2, 0.9], vec![0.3, 0.8, 0.1]]).unwrap();
        let (path, dead) = decode_path(&g, &h, &steps).unwrap();
        assert_eq!(path, vec![2, 1]);
        assert!(dead.is_empty());
    }

    #[test]
    fn constraint_dominates_similarity() {
        let g = star();
        let h = EmbeddingMatrix::identity(3);
        // Step 2 matches c best, but c is not a successor of c.
        let steps = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.1, 0.0, 1.0]]).unwrap();
        let (path, _) = decode_path(&g, &h, &steps).unwrap();
        assert_eq!(path, vec![2, 0]);
    }

    #[test]
    fn dead_end_falls_back_and_flags() {
        let g = star();
        let h = EmbeddingMatrix::identity(3);
        let steps = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let (path, dead) = decode_path(&g, &h, &steps).unwrap();
        assert_eq!(path, vec![0, 1]);
        assert_eq!(dead, vec![1]);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let g = star();
        let h = EmbeddingMatrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let steps = EmbeddingMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(decode_path(&g, &h, &steps).unwrap().0, vec![0]);
    }

    fn scoring_mock(favourites: &'static [&'static str]) -> MockResponder {
        MockResponder::new().with_fallback(move |prompt| {
            if prompt.starts_with("# CANDIDATE TASK LIST #") {
                let list_end = prompt.find("\n\n# GOAL #").unwrap();
                let list: Vec<serde_json::Value> = serde_json::from_str(&prompt[24..list_end]).unwrap();
                let scores: serde_json::Map<String, serde_json::Value> = list
                    .iter()
                    .map(|t| {
                        let id = t["id"].as_str().unwrap().to_string();
                        let s = if favourites.contains(&id.as_str()) { 4 } else { 2 };
                        (id, serde_json::json!(s))
                    })
                    .collect();
                Some(serde_json::Value::Object(scores).to_string())
            } else if prompt.starts_with("# GOAL #\nBased on the provided # USER REQUEST #") {
                Some("{\"best_solution\": [\"nope\"]}".into())
            } else {
                None
            }
        })
    }

    fn chain() -> TaskGraph {
        TaskGraph::from_parts(
            [("a", "1"), ("b", "2"), ("c", "3"), ("d", "4")],
            [
                ("a", "b", LinkKind::Resource),
                ("a", "c", LinkKind::Resource),
                ("b", "d", LinkKind::Resource),
                ("c", "d", LinkKind::Resource),
            ],
        )
        .unwrap()
    }

    #[test]
    fn greedy_call_count_and_beam_reduction() {
        let g = chain();
        let prompts = PromptContext::new(&g, None);
        let steps: Vec<String> = ["s1", "s2", "s3"].iter().map(|s| s.to_string()).collect();
        let client = LlmClient::mock(scoring_mock(&["a", "c", "d"]), DecodingParams::default());
        let greedy = graph_search("r", &steps, &g, &client, &prompts, &SearchConfig::default(), None).unwrap();
        assert_eq!(greedy.exchanges.len(), 3);
        assert_eq!(greedy.nodes, vec!["a", "c", "d"]);
        let beam1 = SearchConfig {
            strategy: SearchStrategy::Beam,
            beam_width: 1,
            ..Default::default()
        };
        let b = graph_search("r", &steps, &g, &client, &prompts, &beam1, None).unwrap();
        assert_eq!(b.nodes, greedy.nodes);
        assert_eq!(b.exchanges.len(), greedy.exchanges.len());
    }

    #[test]
    fn beam_selection_falls_back_on_invalid_answer() {
        let g = chain();
        let prompts = PromptContext::new(&g, None);
        let steps: Vec<String> = ["s1", "s2"].iter().map(|s| s.to_string()).collect();
        let client = LlmClient::mock(scoring_mock(&["a", "b", "c"]), DecodingParams::default());
        let cfg = SearchConfig {
            strategy: SearchStrategy::Beam,
            ..Default::default()
        };
        let p = graph_search("r", &steps, &g, &client, &prompts, &cfg, None).unwrap();
        // depth 1: one call; depth 2: two calls (a, b kept); plus selection.
        assert_eq!(p.exchanges.len(), 1 + 2 + 1);
        assert!(p.flags.contains(&PlanFlag::InvalidSelection));
        assert_eq!(p.nodes, vec!["a", "b"]);
        assert!(p.hallucinated_links.is_empty());
    }

    #[test]
    fn adaptive_keeps_all_above_threshold() {
        let g = chain();
        let prompts = PromptContext::new(&g, None);
        let steps: Vec<String> = ["s1", "s2"].iter().map(|s| s.to_string()).collect();
        let client = LlmClient::mock(scoring_mock(&["a", "b", "c"]), DecodingParams::default());
        let cfg = SearchConfig {
            strategy: SearchStrategy::Adaptive,
            ..Default::default()
        };
        let p = graph_search("r", &steps, &g, &client, &prompts, &cfg, None).unwrap();
        // a, b, c pass at depth 1; from a: b, c; from b: d (below, kept as best);
        // from c: d. Four paths go to selection.
        assert_eq!(p.exchanges.len(), 1 + 3 + 1);
    }

    #[test]
    fn parameter_alignment() {
        let g = chain();
        let prompts = PromptContext::new(&g, None);
        let plan = Plan {
            nodes: vec!["a".into(), "b".into()],
            links: vec![("a".into(), "b".into())],
            ..Plan::default()
        };
        let client = LlmClient::mock(
            MockResponder::new().when_contains(
                "# PLANNED TASKS #",
                r#"{"task_nodes": [{"task": "b", "arguments": ["x"]}]}"#,
            ),
            DecodingParams::default(),
        );
        let filled = fill_parameters("r", plan.clone(), &g, &client, &prompts).unwrap();
        assert_eq!(filled.arguments, Some(vec![vec![], vec![Argument::value("x")]]));
        assert!(filled.flags.contains(&PlanFlag::AlignmentWarning { planned: 2, returned: 1 }));

        let client = LlmClient::mock(
            MockResponder::new().when_contains("# PLANNED TASKS #", "garbage"),
            DecodingParams::default(),
        );
        let filled = fill_parameters("r", plan, &g, &client, &prompts).unwrap();
        assert!(filled.arguments.is_none());
        assert_eq!(filled.exchanges.len(), 1);
    }
}
