//! Dependency graph model, validation, and level partitioning.
//!
//! A plan is a DAG of sub-tasks: nodes carry a tool name and a query template,
//! edges mean "needs the output of". [`topological_levels`] partitions a
//! validated graph into execution levels; everything in one level can run as a
//! single parallel batch.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tool a sub-task invokes when the plan names none.
pub const DEFAULT_TOOL: &str = "search";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("node id is empty")]
    EmptyNodeId,
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("node `{node}` depends on unknown node `{missing}`")]
    DanglingDependency { node: String, missing: String },
    #[error(
        "node `{node}` uses placeholder `{{{placeholder}}}` which is not among its dependencies"
    )]
    UndeclaredPlaceholder { node: String, placeholder: String },
    #[error("dependency cycle: {}", path.join(" -> "))]
    Cycle { path: Vec<String> },
    #[error("no binding for placeholder `{{{0}}}`")]
    UnboundPlaceholder(String),
}

/// One sub-task of a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    /// Unique id within its graph, e.g. `s1` or `Task1`.
    pub id: String,
    /// What to search or investigate.
    pub description: String,
    /// Tool this sub-task invokes.
    pub tool_name: String,
    /// Query text, possibly containing `{node-id}` placeholders that refer to
    /// dependency outputs.
    pub query_template: String,
    /// Ids of the nodes whose outputs this one needs. Ordered, duplicates
    /// collapsed.
    pub depends: Vec<String>,
}

impl TaskNode {
    /// Node with no dependencies whose template equals its description.
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        let description = description.into();
        TaskNode {
            id: id.into(),
            query_template: description.clone(),
            description,
            tool_name: DEFAULT_TOOL.to_string(),
            depends: Vec::new(),
        }
    }

    pub fn with_tool(mut self, tool: impl Into<String>) -> Self {
        self.tool_name = tool.into();
        self
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.query_template = template.into();
        self
    }

    pub fn with_depends<I, S>(mut self, depends: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.depends = depends.into_iter().map(Into::into).collect();
        self
    }
}

/// Directed acyclic graph of sub-tasks. Nodes keep declaration order; edges
/// are derived from each node's `depends` list, so the two can never drift
/// apart.
///
/// Construction checks structure (ids resolve, placeholders declared);
/// acyclicity is checked by [`validate_dag`], which parsers run before
/// handing a graph to the executor.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DependencyGraph {
    nodes: IndexMap<String, TaskNode>,
}

impl DependencyGraph {
    /// Builds a graph from nodes in declaration order.
    ///
    /// Duplicate entries in a node's `depends` are collapsed keeping first
    /// occurrence. Fails on empty or duplicate ids, dependencies naming
    /// absent nodes, and template placeholders not declared as dependencies.
    /// Cycles are *not* checked here; see [`validate_dag`].
    pub fn from_nodes(nodes: impl IntoIterator<Item = TaskNode>) -> Result<Self, GraphError> {
        let mut map: IndexMap<String, TaskNode> = IndexMap::new();
        for mut node in nodes {
            if node.id.is_empty() {
                return Err(GraphError::EmptyNodeId);
            }
            if map.contains_key(&node.id) {
                return Err(GraphError::DuplicateNodeId(node.id));
            }
            let mut seen = Vec::with_capacity(node.depends.len());
            for dep in node.depends.drain(..) {
                if !seen.contains(&dep) {
                    seen.push(dep);
                }
            }
            node.depends = seen;
            map.insert(node.id.clone(), node);
        }
        let graph = DependencyGraph { nodes: map };
        for node in graph.nodes.values() {
            for dep in &node.depends {
                if !graph.nodes.contains_key(dep) {
                    return Err(GraphError::DanglingDependency {
                        node: node.id.clone(),
                        missing: dep.clone(),
                    });
                }
            }
            for placeholder in placeholders(&node.query_template) {
                if !node.depends.iter().any(|d| d == &placeholder) {
                    return Err(GraphError::UndeclaredPlaceholder {
                        node: node.id.clone(),
                        placeholder,
                    });
                }
            }
        }
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TaskNode> {
        self.nodes.get(id)
    }

    /// Nodes in declaration order.
    pub fn nodes(&self) -> impl Iterator<Item = &TaskNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    /// Edges `(from, to)` meaning "`to` depends on `from`", ordered by the
    /// dependent node's declaration order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.nodes.values().flat_map(|node| {
            node.depends
                .iter()
                .map(move |dep| (dep.as_str(), node.id.as_str()))
        })
    }

    fn declaration_index(&self, id: &str) -> usize {
        self.nodes.get_index_of(id).unwrap_or(usize::MAX)
    }
}

/// Ordered execution levels of a validated graph. Levels are disjoint, cover
/// every node, and each node sits exactly one level after its deepest
/// dependency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    levels: Vec<Vec<String>>,
}

impl ExecutionPlan {
    pub fn levels(&self) -> &[Vec<String>] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Level index of a node, if present.
    pub fn level_of(&self, id: &str) -> Option<usize> {
        self.levels
            .iter()
            .position(|level| level.iter().any(|n| n == id))
    }
}

/// Checks that the graph has no directed cycle.
///
/// Errors carry one witness cycle as an id path whose first and last entries
/// coincide. Self-references surface as the two-entry path `[x, x]`.
pub fn validate_dag(graph: &DependencyGraph) -> Result<(), GraphError> {
    match peel_levels(graph) {
        Ok(_) => Ok(()),
        Err(err) => Err(err),
    }
}

/// Partitions a validated graph into earliest-possible execution levels.
///
/// Level 0 holds the nodes with no dependencies; level i holds the nodes
/// whose dependencies all lie in earlier levels with at least one in level
/// i-1. Within a level, ids keep node declaration order, so downstream
/// observation aggregation is reproducible. The empty graph yields no levels.
pub fn topological_levels(graph: &DependencyGraph) -> Result<ExecutionPlan, GraphError> {
    peel_levels(graph)
}

fn peel_levels(graph: &DependencyGraph) -> Result<ExecutionPlan, GraphError> {
    let mut pending: IndexMap<&str, usize> = graph
        .nodes()
        .map(|n| (n.id.as_str(), n.depends.len()))
        .collect();
    let mut dependents: IndexMap<&str, Vec<&str>> = IndexMap::new();
    for (from, to) in graph.edges() {
        dependents.entry(from).or_default().push(to);
    }

    let mut levels: Vec<Vec<String>> = Vec::new();
    let mut frontier: Vec<&str> = pending
        .iter()
        .filter(|(_, deg)| **deg == 0)
        .map(|(id, _)| *id)
        .collect();
    while !frontier.is_empty() {
        for id in &frontier {
            pending.shift_remove(id);
        }
        let mut next: Vec<&str> = Vec::new();
        for id in &frontier {
            for dependent in dependents.get(id).map(Vec::as_slice).unwrap_or(&[]) {
                if let Some(deg) = pending.get_mut(dependent) {
                    *deg -= 1;
                    if *deg == 0 {
                        next.push(dependent);
                    }
                }
            }
        }
        levels.push(frontier.iter().map(|id| id.to_string()).collect());
        next.sort_by_key(|id| graph.declaration_index(id));
        next.dedup();
        frontier = next;
    }

    if pending.is_empty() {
        Ok(ExecutionPlan { levels })
    } else {
        Err(GraphError::Cycle {
            path: find_cycle(graph, pending.keys().copied().collect()),
        })
    }
}

/// Walks dependency edges among the stuck nodes until an id repeats, then
/// trims the walk to the loop itself.
fn find_cycle(graph: &DependencyGraph, stuck: Vec<&str>) -> Vec<String> {
    let start = stuck[0];
    let mut path: Vec<&str> = vec![start];
    let mut current = start;
    loop {
        let node = graph.get(current).expect("stuck node exists");
        let next = node
            .depends
            .iter()
            .find(|d| stuck.contains(&d.as_str()))
            .expect("stuck node keeps an unresolved dependency");
        if let Some(pos) = path.iter().position(|id| id == next) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
            cycle.push(next.clone());
            // Report in dependency order: each id is followed by one that
            // depends on it.
            cycle.reverse();
            return cycle;
        }
        path.push(next);
        current = next;
    }
}

/// Substitutes each `{x}` in the node's query template with `bindings[x]`.
///
/// Single left-to-right pass; substituted text is never re-scanned.
pub fn resolve_query(
    node: &TaskNode,
    bindings: &IndexMap<String, String>,
) -> Result<String, GraphError> {
    let template = &node.query_template;
    let mut out = String::with_capacity(template.len());
    let mut rest = template.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match bindings.get(key) {
                    Some(value) => out.push_str(value),
                    None => return Err(GraphError::UnboundPlaceholder(key.to_string())),
                }
                rest = &after[close + 1..];
            }
            None => {
                // No closing brace: the remainder cannot be placeholder
                // syntax, keep it literally.
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder ids appearing in a template, in order, deduplicated.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = after[..close].to_string();
                if !found.contains(&key) {
                    found.push(key);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    found
}
