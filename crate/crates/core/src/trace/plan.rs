//! Parsers for the two plan body formats.
//!
//! Plans arrive either as task-list text:
//!
//! ```text
//! Task 1: Search for the first person's occupation
//! - Dependencies: none
//! Task 2: Search for the second person's occupation
//! - Dependencies: none
//! Task 3: Compare the two occupations
//! - Dependencies: Task 1, Task 2
//! ```
//!
//! or as the node-element DSL:
//!
//! ```text
//! <node id="s1">search("capital of France")</node>
//! <node id="s3" depends="s1">search("population of {s1}")</node>
//! ```
//!
//! Both produce the same [`DependencyGraph`]; the executor never cares which
//! format the policy chose.

use crate::graph::{validate_dag, DependencyGraph, GraphError, TaskNode};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan declares no tasks")]
    EmptyPlan,
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
    #[error("task `{task}` depends on undeclared task `{reference}`")]
    UnknownTaskReference { task: String, reference: String },
    #[error("malformed node element: {0}")]
    MalformedNodeElement(String),
    #[error("node `{node}`: expected a `tool(\"query\")` call, got `{got}`")]
    UnknownToolSyntax { node: String, got: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Parses a plan body in whichever format it uses.
///
/// Bodies containing a `<node` element go through the DSL parser; everything
/// else through the task-list parser. Either way the result has passed
/// [`validate_dag`].
pub fn parse_plan(body: &str) -> Result<DependencyGraph, PlanError> {
    if body.contains("<node") {
        parse_graph_dsl(body)
    } else {
        parse_plan_text(body)
    }
}

/// Task ids are written with or without internal spaces (`Task 1` in
/// dependency lists, `Task1` in the template); strip whitespace so both
/// spellings name the same node.
fn normalize_task_id(raw: &str) -> String {
    raw.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Parses the task-list format.
///
/// Recognized lines (leading `-`/`*` bullets and blank lines are tolerated):
/// `Task <n>: description` opens a task; `Task ID: <id>` likewise;
/// `Description: …` and `Dependencies: …` fill the open task; any other
/// text continues the open task's description. Tasks may also arrive as one
/// line — `Task ID: Task1, Description: find it, Dependencies: none` — which
/// is split on the field markers first.
pub fn parse_plan_text(body: &str) -> Result<DependencyGraph, PlanError> {
    // One-line task entries carry field markers inline; break them onto
    // lines so a single line-oriented pass handles both shapes.
    let unfolded = body
        .replace(", Description:", "\nDescription:")
        .replace(", Dependencies:", "\nDependencies:");

    struct Draft {
        id: String,
        description: Vec<String>,
        depends_raw: Vec<String>,
    }
    let mut drafts: Vec<Draft> = Vec::new();
    for line in unfolded.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim_start();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("Task ID:") {
            drafts.push(Draft {
                id: normalize_task_id(rest),
                description: Vec::new(),
                depends_raw: Vec::new(),
            });
            continue;
        }
        if let Some((head, desc)) = line.split_once(':') {
            let head = head.trim();
            if is_task_header(head) {
                drafts.push(Draft {
                    id: normalize_task_id(head),
                    description: vec![desc.trim().to_string()],
                    depends_raw: Vec::new(),
                });
                continue;
            }
            if head == "Description" {
                if let Some(draft) = drafts.last_mut() {
                    draft.description.push(desc.trim().to_string());
                    continue;
                }
            }
            if head == "Dependencies" {
                if let Some(draft) = drafts.last_mut() {
                    draft.depends_raw = parse_dependency_list(desc);
                    continue;
                }
            }
        }
        // Free text: continuation of the open task's description.
        if let Some(draft) = drafts.last_mut() {
            draft.description.push(line.to_string());
        }
    }
    if drafts.is_empty() {
        return Err(PlanError::EmptyPlan);
    }

    let ids: Vec<String> = drafts.iter().map(|d| d.id.clone()).collect();
    let mut nodes = Vec::with_capacity(drafts.len());
    for draft in &drafts {
        for (i, prior) in ids.iter().enumerate() {
            if prior == &draft.id && ids[..i].contains(prior) {
                return Err(PlanError::DuplicateTaskId(draft.id.clone()));
            }
        }
        let mut depends = Vec::new();
        for dep_raw in &draft.depends_raw {
            let dep = normalize_task_id(dep_raw);
            if !ids.contains(&dep) {
                return Err(PlanError::UnknownTaskReference {
                    task: draft.id.clone(),
                    reference: dep_raw.clone(),
                });
            }
            depends.push(dep);
        }
        let description = draft
            .description
            .iter()
            .filter(|part| !part.is_empty())
            .cloned()
            .collect::<Vec<_>>()
            .join(" ");
        nodes.push(
            TaskNode::new(draft.id.clone(), description.clone())
                .with_template(description)
                .with_depends(depends),
        );
    }
    finish(nodes)
}

/// `Task 3` / `Task3` — a task header is the word `Task` plus a number.
fn is_task_header(head: &str) -> bool {
    head.strip_prefix("Task")
        .map(|rest| {
            let rest = rest.trim();
            !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit())
        })
        .unwrap_or(false)
}

/// `"Task 1, Task 2"` → the raw entries; `"none"` → empty.
fn parse_dependency_list(raw: &str) -> Vec<String> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("none") {
        return Vec::new();
    }
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parses the node-element DSL.
///
/// The body must be a sequence of `<node id=".." [depends="a,b"]>` elements
/// whose inner text is a single `tool("query")` call. The query string
/// becomes both the node's template and its description.
pub fn parse_graph_dsl(body: &str) -> Result<DependencyGraph, PlanError> {
    let mut nodes = Vec::new();
    let mut rest = body;
    loop {
        let Some(start) = rest.find('<') else {
            if !rest.trim().is_empty() {
                return Err(PlanError::MalformedNodeElement(format!(
                    "unexpected text `{}`",
                    snippet(rest.trim())
                )));
            }
            break;
        };
        if !rest[..start].trim().is_empty() {
            return Err(PlanError::MalformedNodeElement(format!(
                "unexpected text `{}`",
                snippet(rest[..start].trim())
            )));
        }
        rest = &rest[start..];
        let Some(open_end) = rest.find('>') else {
            return Err(PlanError::MalformedNodeElement(
                "unterminated element".to_string(),
            ));
        };
        let open_tag = &rest[1..open_end];
        let Some(attrs) = open_tag.strip_prefix("node") else {
            return Err(PlanError::MalformedNodeElement(format!(
                "expected a node element, got `<{}>`",
                snippet(open_tag)
            )));
        };
        let (id, depends) = parse_node_attrs(attrs)?;
        let after_open = &rest[open_end + 1..];
        let Some(close) = after_open.find("</node>") else {
            return Err(PlanError::MalformedNodeElement(format!(
                "node `{id}` is never closed"
            )));
        };
        let inner = after_open[..close].trim();
        let (tool_name, template) = parse_tool_call(&id, inner)?;
        nodes.push(
            TaskNode::new(id, template.clone())
                .with_tool(tool_name)
                .with_template(template)
                .with_depends(depends),
        );
        rest = &after_open[close + "</node>".len()..];
    }
    if nodes.is_empty() {
        return Err(PlanError::EmptyPlan);
    }
    let mut seen: Vec<&str> = Vec::new();
    for node in &nodes {
        if seen.contains(&node.id.as_str()) {
            return Err(PlanError::DuplicateTaskId(node.id.clone()));
        }
        seen.push(&node.id);
    }
    for node in &nodes {
        for dep in &node.depends {
            if !seen.contains(&dep.as_str()) {
                return Err(PlanError::UnknownTaskReference {
                    task: node.id.clone(),
                    reference: dep.clone(),
                });
            }
        }
    }
    finish(nodes)
}

/// Attribute text of a node element → (id, depends).
fn parse_node_attrs(attrs: &str) -> Result<(String, Vec<String>), PlanError> {
    let mut id = None;
    let mut depends = Vec::new();
    let mut rest = attrs.trim();
    while !rest.is_empty() {
        let Some(eq) = rest.find('=') else {
            return Err(PlanError::MalformedNodeElement(format!(
                "bad attribute syntax `{}`",
                snippet(rest)
            )));
        };
        let name = rest[..eq].trim();
        let after = rest[eq + 1..].trim_start();
        let Some(value_rest) = after.strip_prefix('"') else {
            return Err(PlanError::MalformedNodeElement(format!(
                "attribute `{name}` value is not quoted"
            )));
        };
        let Some(end) = value_rest.find('"') else {
            return Err(PlanError::MalformedNodeElement(format!(
                "attribute `{name}` value is unterminated"
            )));
        };
        let value = &value_rest[..end];
        match name {
            "id" => id = Some(value.to_string()),
            "depends" => {
                depends = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
            }
            other => {
                return Err(PlanError::MalformedNodeElement(format!(
                    "unknown attribute `{other}`"
                )));
            }
        }
        rest = value_rest[end + 1..].trim_start();
    }
    match id {
        Some(id) if !id.is_empty() => Ok((id, depends)),
        _ => Err(PlanError::MalformedNodeElement(
            "node element lacks an id".to_string(),
        )),
    }
}

/// `search("population of {s1}")` → (`search`, `population of {s1}`).
fn parse_tool_call(node: &str, inner: &str) -> Result<(String, String), PlanError> {
    let bad = || PlanError::UnknownToolSyntax {
        node: node.to_string(),
        got: snippet(inner),
    };
    let open = inner.find('(').ok_or_else(bad)?;
    let name = &inner[..open];
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(bad());
    }
    let args = inner[open + 1..].strip_suffix(')').ok_or_else(bad)?;
    let args = args.trim();
    let template = args
        .strip_prefix('"')
        .and_then(|a| a.strip_suffix('"'))
        .ok_or_else(bad)?;
    Ok((name.to_string(), template.to_string()))
}

fn snippet(text: &str) -> String {
    const MAX: usize = 40;
    if text.len() <= MAX {
        text.to_string()
    } else {
        let mut end = MAX;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &text[..end])
    }
}

/// Writes a graph back out in the node-element DSL, one element per line.
///
/// `parse_graph_dsl(serialize_graph_dsl(g))` reproduces `g` for any graph
/// whose descriptions equal its templates (which is what both parsers build).
pub fn serialize_graph_dsl(graph: &DependencyGraph) -> String {
    graph
        .nodes()
        .map(|node| {
            let depends = if node.depends.is_empty() {
                String::new()
            } else {
                format!(" depends=\"{}\"", node.depends.join(","))
            };
            format!(
                "<node id=\"{}\"{}>{}(\"{}\")</node>",
                node.id, depends, node.tool_name, node.query_template
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn finish(nodes: Vec<TaskNode>) -> Result<DependencyGraph, PlanError> {
    let graph = DependencyGraph::from_nodes(nodes).map_err(|e| match e {
        GraphError::DuplicateNodeId(id) => PlanError::DuplicateTaskId(id),
        other => PlanError::Graph(other),
    })?;
    validate_dag(&graph)?;
    Ok(graph)
}
