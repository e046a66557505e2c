use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::taskgraph::canonical_name;

/// Slot names used by the bundled templates.
pub mod slot {
    pub const TASK_LIST: &str = "task list";
    pub const EXAMPLES: &str = "in-context learning examples";
    pub const USER_REQUEST: &str = "user request";
    pub const CANDIDATE_TASKS: &str = "candidate tasks";
    pub const STEP_DESCRIPTION: &str = "step description";
    pub const STEPS: &str = "steps";
    pub const SOLUTIONS: &str = "list of searched solutions";
    pub const PLANNED_TASKS: &str = "a list of previously GNN retrieved tasks";
    pub const TASK_DETAILS: &str = "details, i.e., input and output requirements of each planned task";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    DirectInference,
    StepsOnly,
    TaskAssessment,
    PathSelection,
    ParameterFill,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::DirectInference,
        TemplateName::StepsOnly,
        TemplateName::TaskAssessment,
        TemplateName::PathSelection,
        TemplateName::ParameterFill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::DirectInference => "direct_inference",
            TemplateName::StepsOnly => "steps_only",
            TemplateName::TaskAssessment => "task_assessment",
            TemplateName::PathSelection => "path_selection",
            TemplateName::ParameterFill => "parameter_fill",
        }
    }

    fn bundled_body(self) -> &'static str {
        match self {
            TemplateName::DirectInference => include_str!("../../assets/prompts/direct_inference.txt"),
            TemplateName::StepsOnly => include_str!("../../assets/prompts/steps_only.txt"),
            TemplateName::TaskAssessment => include_str!("../../assets/prompts/task_assessment.txt"),
            TemplateName::PathSelection => include_str!("../../assets/prompts/path_selection.txt"),
            TemplateName::ParameterFill => include_str!("../../assets/prompts/parameter_fill.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(String),
}

impl PromptTemplate {
    pub fn bundled(name: TemplateName) -> Self {
        Self {
            name,
            body: name.bundled_body().to_string(),
        }
    }

    pub fn custom(name: TemplateName, body: impl Into<String>) -> Self {
        Self { name, body: body.into() }
    }

    fn pieces(&self) -> Vec<Piece<'_>> {
        let mut out = Vec::new();
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find("{{") {
            let Some(close) = rest[open + 2..].find("}}") else { break };
            out.push(Piece::Text(&rest[..open]));
            out.push(Piece::Slot(canonical_name(&rest[open + 2..open + 2 + close])));
            rest = &rest[open + 2 + close + 2..];
        }
        out.push(Piece::Text(rest));
        out
    }

    /// Distinct slot names, in order of first appearance.
    pub fn slots(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.pieces()
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) if seen.insert(s.clone()) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Single-pass literal substitution. Slot keys are matched after
    /// whitespace canonicalization.
    pub fn render(&self, values: &BTreeMap<String, String>) -> Result<String, LlmError> {
        let values: BTreeMap<String, &str> = values.iter().map(|(k, v)| (canonical_name(k), v.as_str())).collect();
        let slots = self.slots();
        if let Some(unknown) = values.keys().find(|k| !slots.contains(k)) {
            return Err(LlmError::UnknownSlot {
                template: self.name,
                slot: unknown.clone(),
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in self.pieces() {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => match values.get(&s) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(LlmError::MissingSlot {
                            template: self.name,
                            slot: s,
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Shorthand for building slot maps.
pub fn slots<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
