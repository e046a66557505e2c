//! The text-attributed task graph.
//!
//! Nodes are invocable sub-tasks with a unique name and a natural-language
//! description; directed edges are dependencies between them. Node ids are
//! dense and assigned in file order, so they double as embedding row indices.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to read graph file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed graph JSON: {0}")]
    Parse(String),
    #[error("graph schema error: {0}")]
    Schema(String),
    #[error("edge {from} -> {to} references a node that does not exist")]
    DanglingEdge { from: String, to: String },
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: String, to: String },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

/// Dependency label carried by an edge. Which label a dataset uses depends on
/// how its graph was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    #[default]
    Resource,
    Temporal,
    Category,
}

impl LinkKind {
    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "resource" => Some(Self::Resource),
            "temporal" => Some(Self::Temporal),
            "category" => Some(Self::Category),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskNode {
    pub id: NodeId,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskEdge {
    pub source: NodeId,
    pub target: NodeId,
    pub kind: LinkKind,
}

/// Trims and collapses internal whitespace runs to a single space. Case is
/// preserved: a case change is a different name.
pub fn canonical_name(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone)]
pub struct TaskGraph {
    nodes: Vec<TaskNode>,
    edges: Vec<TaskEdge>,
    index: HashMap<String, NodeId>,
    out_adj: Vec<Vec<NodeId>>,
    edge_set: HashSet<(NodeId, NodeId)>,
}

// Wire format. `id`/`desc` are accepted as aliases because TaskBench graph
// files use those keys.
#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    #[serde(default, alias = "edges")]
    links: Vec<LinkRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    #[serde(alias = "id")]
    name: String,
    #[serde(alias = "desc", default)]
    description: String,
}

#[derive(Serialize, Deserialize)]
struct LinkRecord {
    source: String,
    target: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
}

impl TaskGraph {
    /// Builds a graph from `(name, description)` pairs and `(source, target,
    /// kind)` name triples, validating every invariant.
    pub fn from_parts<N, S>(
        nodes: impl IntoIterator<Item = (N, S)>,
        edges: impl IntoIterator<Item = (N, N, LinkKind)>,
    ) -> Result<Self, GraphError>
    where
        N: AsRef<str>,
        S: Into<String>,
    {
        let mut out_nodes = Vec::new();
        let mut index = HashMap::new();
        for (name, description) in nodes {
            let name = canonical_name(name.as_ref());
            if name.is_empty() {
                return Err(GraphError::Schema("node name must be non-empty".into()));
            }
            let id = out_nodes.len();
            if index.insert(name.clone(), id).is_some() {
                return Err(GraphError::DuplicateNode(name));
            }
            out_nodes.push(TaskNode {
                id,
                name,
                description: description.into(),
            });
        }

        let mut out_edges = Vec::new();
        let mut edge_set = HashSet::new();
        let mut out_adj = vec![Vec::new(); out_nodes.len()];
        for (source, target, kind) in edges {
            let (s, t) = (canonical_name(source.as_ref()), canonical_name(target.as_ref()));
            let (Some(&si), Some(&ti)) = (index.get(&s), index.get(&t)) else {
                return Err(GraphError::DanglingEdge { from: s, to: t });
            };
            if !edge_set.insert((si, ti)) {
                return Err(GraphError::DuplicateEdge { from: s, to: t });
            }
            out_adj[si].push(ti);
            out_edges.push(TaskEdge {
                source: si,
                target: ti,
                kind,
            });
        }
        for list in &mut out_adj {
            list.sort_unstable();
        }
        Ok(Self {
            nodes: out_nodes,
            edges: out_edges,
            index,
            out_adj,
            edge_set,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, GraphError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        let file: GraphFile =
            serde_json::from_value(value).map_err(|e| GraphError::Schema(e.to_string()))?;
        let mut edges = Vec::with_capacity(file.links.len());
        for link in &file.links {
            let kind = match &link.kind {
                None => LinkKind::Resource,
                Some(raw) => LinkKind::parse(raw)
                    .ok_or_else(|| GraphError::Schema(format!("unknown link type {raw:?}")))?,
            };
            edges.push((link.source.as_str(), link.target.as_str(), kind));
        }
        let nodes = file
            .nodes
            .iter()
            .map(|n| (n.name.as_str(), n.description.clone()));
        Self::from_parts(nodes, edges)
    }

    pub fn to_json_string(&self) -> String {
        let file = GraphFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    name: n.name.clone(),
                    description: n.description.clone(),
                })
                .collect(),
            links: self
                .edges
                .iter()
                .map(|e| LinkRecord {
                    source: self.nodes[e.source].name.clone(),
                    target: self.nodes[e.target].name.clone(),
                    kind: Some(
                        match e.kind {
                            LinkKind::Resource => "resource",
                            LinkKind::Temporal => "temporal",
                            LinkKind::Category => "category",
                        }
                        .to_string(),
                    ),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serialization is infallible")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[TaskNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[TaskEdge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Result<&TaskNode, GraphError> {
        self.nodes.get(id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    /// Id of the node with this name, after canonicalization.
    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.index.get(&canonical_name(name)).copied()
    }

    /// Out-neighbors of `v` (targets of edges leaving `v`), sorted by id.
    pub fn neighbors(&self, v: NodeId) -> Result<&[NodeId], GraphError> {
        self.out_adj
            .get(v)
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownNode(v))
    }

    pub fn has_edge_ids(&self, source: NodeId, target: NodeId) -> bool {
        self.edge_set.contains(&(source, target))
    }

    pub fn contains_node(&self, name: &str) -> bool {
        self.id_of(name).is_some()
    }

    pub fn contains_edge(&self, source_name: &str, target_name: &str) -> bool {
        match (self.id_of(source_name), self.id_of(target_name)) {
            (Some(s), Some(t)) => self.has_edge_ids(s, t),
            _ => false,
        }
    }

    /// Symmetrized neighborhoods without self loops, sorted by id. Used for
    /// message passing; decoding uses [`TaskGraph::neighbors`].
    pub fn undirected_neighbors(&self) -> Vec<Vec<NodeId>> {
        let mut sym: Vec<Vec<NodeId>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if e.source != e.target {
                sym[e.source].push(e.target);
                sym[e.target].push(e.source);
            }
        }
        for list in &mut sym {
            list.sort_unstable();
            list.dedup();
        }
        sym
    }

    /// Returns the isomorphic graph in which node `i` moves to position
    /// `permutation[i]`. Edge order is preserved.
    pub fn relabel(&self, permutation: &[NodeId]) -> Result<Self, GraphError> {
        validate_permutation(permutation, self.nodes.len())?;
        let mut slots: Vec<Option<&TaskNode>> = vec![None; self.nodes.len()];
        for (old, &new) in permutation.iter().enumerate() {
            slots[new] = Some(&self.nodes[old]);
        }
        let nodes = slots
            .into_iter()
            .map(|n| {
                let n = n.expect("bijection fills every slot");
                (n.name.as_str(), n.description.clone())
            })
            .collect::<Vec<_>>();
        let edges = self
            .edges
            .iter()
            .map(|e| {
                (
                    self.nodes[e.source].name.as_str(),
                    self.nodes[e.target].name.as_str(),
                    e.kind,
                )
            })
            .collect::<Vec<_>>();
        Self::from_parts(nodes, edges)
    }

    /// The task list as the JSON array rendered into prompts.
    pub fn task_list_json(&self) -> String {
        let list: Vec<serde_json::Value> = self
            .nodes
            .iter()
            .map(|n| serde_json::json!({ "id": n.name, "desc": n.description }))
            .collect();
        serde_json::to_string(&list).expect("json")
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<TaskGraph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    TaskGraph::from_json_str(&text)
}

/// Checks that `p` is a bijection on `0..n`.
pub fn validate_permutation(p: &[NodeId], n: usize) -> Result<(), GraphError> {
    if p.len() != n {
        return Err(GraphError::InvalidPermutation(format!(
            "length {} does not match node count {n}",
            p.len()
        )));
    }
    let mut seen = vec![false; n];
    for &x in p {
        if x >= n || std::mem::replace(&mut seen[x], true) {
            return Err(GraphError::InvalidPermutation(format!(
                "{x} is out of range or repeated"
            )));
        }
    }
    Ok(())
}

pub fn invert_permutation(p: &[NodeId]) -> Vec<NodeId> {
    let mut inv = vec![0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

impl PartialEq for TaskGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl fmt::Debug for TaskGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskGraph")
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edges.len())
            .finish()
    }
}
