use std::collections::BTreeMap;

use serde_json::Value;

use super::LlmError;
use crate::corpus::Argument;
use crate::planner::Plan;
use crate::taskgraph::{canonical_name, TaskGraph};

/// Byte ranges of balanced `{...}` regions, string-aware, in order of their
/// opening brace.
fn balanced_objects(text: &str) -> impl Iterator<Item = &str> + '_ {
    let bytes = text.as_bytes();
    (0..bytes.len()).filter(|&i| bytes[i] == b'{').filter_map(move |start| {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_str {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..start + off + 1]);
                    }
                }
                _ => {}
            }
        }
        None
    })
}

fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn strip_fences(text: &str) -> String {
    let mut s = text.to_string();
    for fence in ["```json", "```JSON", "```"] {
        s = s.replace(fence, " ");
    }
    s
}

/// The first balanced JSON object in `text` that parses, after removing
/// code fences. Trailing commas are tolerated.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let cleaned = strip_fences(text);
    for candidate in balanced_objects(&cleaned) {
        let parsed = serde_json::from_str::<Value>(candidate)
            .ok()
            .or_else(|| serde_json::from_str::<Value>(&strip_trailing_commas(candidate)).ok());
        if let Some(Value::Object(map)) = parsed {
            return Some(map);
        }
    }
    None
}

fn as_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items.iter().map(as_text).collect(),
        Some(Value::String(s)) => vec![s.clone()],
        _ => Vec::new(),
    }
}

/// Reads `task_nodes` entries as `(task name, arguments)`. Entries may be
/// bare strings or objects with `task` (or `name`) and `arguments`.
fn task_nodes(v: Option<&Value>) -> Vec<(String, Option<Vec<Argument>>)> {
    let Some(Value::Array(items)) = v else {
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|item| match item {
            Value::Object(obj) => {
                let name = obj.get("task").or_else(|| obj.get("name")).map(as_text)?;
                let args = match obj.get("arguments") {
                    Some(Value::Array(a)) => Some(a.iter().map(Argument::from_json).collect()),
                    Some(Value::Null) | None => None,
                    Some(other) => Some(vec![Argument::from_json(other)]),
                };
                Some((canonical_name(&name), args))
            }
            Value::String(s) => Some((canonical_name(s), None)),
            _ => None,
        })
        .collect()
}

fn task_links(v: Option<&Value>) -> Vec<(String, String)> {
    let Some(Value::Array(items)) = v else {
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|item| {
            let obj = item.as_object()?;
            let s = obj.get("source").map(as_text)?;
            let t = obj.get("target").map(as_text)?;
            Some((canonical_name(&s), canonical_name(&t)))
        })
        .collect()
}

/// Reads a plan from an LLM response. Names missing from `g` are kept and
/// listed in the plan's hallucination fields.
pub fn parse_plan_json(response: &str, g: &TaskGraph) -> Result<Plan, LlmError> {
    let obj = extract_json_object(response).ok_or_else(|| LlmError::ParseFailure("no JSON object found".into()))?;
    if !["task_steps", "task_nodes", "task_links"].iter().any(|k| obj.contains_key(*k)) {
        return Err(LlmError::ParseFailure("JSON object has no plan fields".into()));
    }
    let nodes = task_nodes(obj.get("task_nodes"));
    let any_args = nodes.iter().any(|(_, a)| a.is_some());
    let mut plan = Plan {
        steps: string_list(obj.get("task_steps")),
        nodes: nodes.iter().map(|(n, _)| n.clone()).collect(),
        links: task_links(obj.get("task_links")),
        arguments: any_args.then(|| nodes.into_iter().map(|(_, a)| a.unwrap_or_default()).collect()),
        ..Plan::default()
    };
    plan.mark_hallucinations(g);
    Ok(plan)
}

/// `task_steps` of a decomposition response.
pub fn parse_steps(response: &str) -> Result<Vec<String>, LlmError> {
    let obj = extract_json_object(response).ok_or_else(|| LlmError::ParseFailure("no JSON object found".into()))?;
    match obj.get("task_steps") {
        Some(v @ Value::Array(_)) => Ok(string_list(Some(v))),
        _ => Err(LlmError::ParseFailure("missing task_steps".into())),
    }
}

fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Scores per candidate: rounded half-up, clamped to 1..=5, defaulting to 1
/// for candidates the response leaves out.
pub fn parse_score_dict(response: &str, candidates: &[String]) -> Result<BTreeMap<String, u8>, LlmError> {
    let obj = extract_json_object(response).ok_or_else(|| LlmError::ParseFailure("no JSON object found".into()))?;
    let given: BTreeMap<String, f64> = obj
        .iter()
        .filter_map(|(k, v)| numeric(v).filter(|x| x.is_finite()).map(|x| (canonical_name(k), x)))
        .collect();
    Ok(candidates
        .iter()
        .map(|c| {
            let score = given
                .get(&canonical_name(c))
                .map(|&x| (x + 0.5).floor().clamp(1.0, 5.0) as u8)
                .unwrap_or(1);
            (c.clone(), score)
        })
        .collect())
}

/// The `best_solution` list of a path-selection response.
pub fn parse_best_solution(response: &str) -> Result<Vec<String>, LlmError> {
    let obj = extract_json_object(response).ok_or_else(|| LlmError::ParseFailure("no JSON object found".into()))?;
    match obj.get("best_solution") {
        Some(v @ Value::Array(_)) => Ok(string_list(Some(v)).iter().map(|s| canonical_name(s)).collect()),
        _ => Err(LlmError::ParseFailure("missing best_solution".into())),
    }
}

/// `task_nodes` of a parameter-filling response as `(task, arguments)`.
pub fn parse_parameter_nodes(response: &str) -> Result<Vec<(String, Vec<Argument>)>, LlmError> {
    let obj = extract_json_object(response).ok_or_else(|| LlmError::ParseFailure("no JSON object found".into()))?;
    if !matches!(obj.get("task_nodes"), Some(Value::Array(_))) {
        return Err(LlmError::ParseFailure("missing task_nodes".into()));
    }
    Ok(task_nodes(obj.get("task_nodes"))
        .into_iter()
        .map(|(n, a)| (n, a.unwrap_or_default()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgraph::LinkKind;

    fn graph() -> TaskGraph {
        let names = ["Pose Detection", "Pose-to-Image", "Image-to-Text", "Text-to-Speech"];
        TaskGraph::from_parts(
            names.iter().map(|n| (*n, String::new())),
            names.windows(2).map(|w| (w[0], w[1], LinkKind::Resource)),
        )
        .unwrap()
    }

    const FOUR: &str = r#"{"task_steps": ["a", "b", "c", "d"], "task_nodes": [{"task": "Pose Detection", "arguments": ["example.jpg"]}, {"task": "Pose-to-Image", "arguments": ["<node-0>", "a girl reading"]}, {"task": "Image-to-Text", "arguments": ["<node-1>"]}, {"task": "Text-to-Speech", "arguments": ["<node-2>"]}], "task_links": [{"source": "Pose Detection", "target": "Pose-to-Image"}, {"source": "Pose-to-Image", "target": "Image-to-Text"}, {"source": "Image-to-Text", "target": "Text-to-Speech"}]}"#;

    #[test]
    fn well_formed_plan() {
        let p = parse_plan_json(FOUR, &graph()).unwrap();
        assert_eq!(p.nodes.len(), 4);
        assert_eq!(p.links.len(), 3);
        assert!(p.hallucinated_nodes.is_empty() && p.hallucinated_links.is_empty());
        assert_eq!(p.arguments.as_ref().unwrap()[0], vec![Argument::value("example.jpg")]);
    }

    #[test]
    fn fenced_with_prose() {
        let text = format!("Sure! Here it is:\n```json {FOUR} ``` extra prose {{not json}}");
        assert_eq!(parse_plan_json(&text, &graph()).unwrap().nodes.len(), 4);
    }

    #[test]
    fn hallucinations_are_kept() {
        let text = r#"{"task_nodes": [{"task": "Pose-Drawing"}, {"task": " Image-to-Text "}], "task_links": [{"source": "Pose-Drawing", "target": "Image-to-Text"}, {"source": "Image-to-Text", "target": "Pose Detection"}]}"#;
        let p = parse_plan_json(text, &graph()).unwrap();
        assert_eq!(p.nodes, vec!["Pose-Drawing", "Image-to-Text"]);
        assert_eq!(p.hallucinated_nodes, vec!["Pose-Drawing"]);
        assert_eq!(p.hallucinated_links.len(), 2);
    }

    #[test]
    fn trailing_commas_and_skipped_candidates() {
        let text = r#"{broken {"task_nodes": [{"task": "Text-to-Speech",},],}"#;
        assert_eq!(parse_plan_json(text, &graph()).unwrap().nodes, vec!["Text-to-Speech"]);
    }

    #[test]
    fn unusable_responses_fail() {
        for bad in ["", "no json here", "{\"unrelated\": 1}", "[1,2]", "{\"task_nodes\": [", "}{"] {
            assert!(matches!(parse_plan_json(bad, &graph()), Err(LlmError::ParseFailure(_))), "{bad}");
        }
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_the_scanner() {
        let text = r#"{"task_steps": ["use { and } freely"], "task_nodes": ["Image-to-Text"]}"#;
        let p = parse_plan_json(text, &graph()).unwrap();
        assert_eq!(p.steps, vec!["use { and } freely"]);
    }

    #[test]
    fn score_dicts() {
        let c: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let s = parse_score_dict(r#"{"A": 5, "B": 2}"#, &c[..2]).unwrap();
        assert_eq!(s["A"], 5);
        assert_eq!(s["B"], 2);
        let s = parse_score_dict(r#"{"A": 7}"#, &c).unwrap();
        assert_eq!((s["A"], s["B"], s["C"]), (5, 1, 1));
        let s = parse_score_dict(r#"{"A": 2.5, "B": "3.49", "C": -4}"#, &c).unwrap();
        assert_eq!((s["A"], s["B"], s["C"]), (3, 3, 1));
        assert!(parse_score_dict("not json", &c).is_err());
    }

    #[test]
    fn best_solution_and_parameters() {
        assert_eq!(
            parse_best_solution(r#"{"best_solution": ["A", " B"]}"#).unwrap(),
            vec!["A", "B"]
        );
        assert!(parse_best_solution("{}").is_err());
        let nodes = parse_parameter_nodes(r#"{"task_nodes": [{"task": "A", "arguments": ["x.jpg"]}, {"task": "B"}]}"#).unwrap();
        assert_eq!(nodes[0].1, vec![Argument::value("x.jpg")]);
        assert!(nodes[1].1.is_empty());
    }
}
