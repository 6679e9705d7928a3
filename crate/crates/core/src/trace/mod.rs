//! Rollout trace protocol: tagged event stream, plan formats, and JSONL
//! persistence.
//!
//! A rollout is the flat text a policy produces, structured by six tags —
//! `think`, `plan`, `search`, `observation`, `reflection`, `answer` — in any
//! order and multiplicity. Parsing keeps the tag bodies verbatim and attaches
//! best-effort structured payloads (a dependency graph, a query list, …).

mod parse;
mod plan;

pub use parse::{parse_stream, IncompleteTag, ParseOutcome, ParserConfig, TraceError};
pub use plan::{parse_graph_dsl, parse_plan, parse_plan_text, serialize_graph_dsl, PlanError};

use crate::graph::DependencyGraph;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

/// The six event kinds of the trace protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Think,
    Plan,
    Search,
    Observation,
    Reflection,
    Answer,
}

impl EventKind {
    /// Canonical tag name (aliases like `tool` normalize away at parse time).
    pub fn tag(self) -> &'static str {
        match self {
            EventKind::Think => "think",
            EventKind::Plan => "plan",
            EventKind::Search => "search",
            EventKind::Observation => "observation",
            EventKind::Reflection => "reflection",
            EventKind::Answer => "answer",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Structured reading of an event body, when one applies and parses.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// A validated dependency graph, from either plan text format.
    Plan(DependencyGraph),
    /// Parallel search queries (`|`-separated in the body).
    Queries(Vec<String>),
    /// Labelled tool results, one per `Doc k` block.
    Results(Vec<ObservationItem>),
    /// Candidate answers (`|`-separated in the body).
    Answers(Vec<String>),
}

/// One tagged event of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub kind: EventKind,
    /// Verbatim text between the open and close tags.
    pub body: String,
    /// Structured payload if the body parses as one; `None` for free-text
    /// kinds and for bodies that fail structured parsing.
    pub payload: Option<Payload>,
}

impl TraceEvent {
    pub fn new(kind: EventKind, body: impl Into<String>) -> Self {
        let body = body.into();
        let payload = derive_payload(kind, &body);
        TraceEvent {
            kind,
            body,
            payload,
        }
    }

    /// The event as protocol text, `<kind>body</kind>`.
    pub fn render(&self) -> String {
        format!("<{k}>{b}</{k}>", k = self.kind.tag(), b = self.body)
    }
}

/// Attaches the structured reading appropriate for the kind, if the body
/// supports one.
fn derive_payload(kind: EventKind, body: &str) -> Option<Payload> {
    match kind {
        EventKind::Plan => parse_plan(body).ok().map(Payload::Plan),
        EventKind::Search => split_queries(body).ok().map(Payload::Queries),
        EventKind::Observation => Some(Payload::Results(parse_observation_body(body))),
        EventKind::Answer => split_queries(body).ok().map(Payload::Answers),
        EventKind::Think | EventKind::Reflection => None,
    }
}

/// Splits a `|`-separated body into trimmed non-empty parts.
///
/// `a | b` → `["a", "b"]`; lone separators and blank segments drop out. A
/// body with no content at all is an error: the protocol has no empty search
/// and no empty answer.
pub fn split_queries(body: &str) -> Result<Vec<String>, TraceError> {
    let parts: Vec<String> = body
        .split('|')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect();
    if parts.is_empty() {
        return Err(TraceError::EmptySearch);
    }
    Ok(parts)
}

/// One labelled block of a rendered observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationItem {
    /// Source label, e.g. the plan node id or a document title.
    pub label: Option<String>,
    pub text: String,
}

impl ObservationItem {
    pub fn new(label: Option<&str>, text: impl Into<String>) -> Self {
        ObservationItem {
            label: label.map(str::to_string),
            text: text.into(),
        }
    }
}

/// Renders tool results as an observation body: one `Doc k` block per item,
/// blank line between blocks.
///
/// ```text
/// Doc 1 - s1:
/// first result text
///
/// Doc 2 - s2:
/// second result text
/// ```
///
/// [`parse_observation_body`] inverts this rendering.
pub fn render_observation(items: &[ObservationItem]) -> String {
    let mut blocks = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let header = match &item.label {
            Some(label) => format!("Doc {} - {}:", i + 1, label),
            None => format!("Doc {}:", i + 1),
        };
        blocks.push(format!("{header}\n{}", item.text));
    }
    blocks.join("\n\n")
}

/// Splits an observation body back into labelled items.
///
/// Block boundaries are `Doc <n>:` / `Doc <n> - label:` header lines. Text
/// without any header is returned as a single unlabelled item; an empty body
/// yields no items.
pub fn parse_observation_body(body: &str) -> Vec<ObservationItem> {
    let lines: Vec<&str> = body.split('\n').collect();
    let mut headers: Vec<(usize, Option<String>)> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if let Some(label) = parse_doc_header(line) {
            headers.push((i, label));
        }
    }
    if headers.is_empty() {
        let trimmed = body.trim();
        if trimmed.is_empty() {
            return Vec::new();
        }
        return vec![ObservationItem::new(None, trimmed)];
    }
    let mut items = Vec::with_capacity(headers.len());
    for (h, (start, label)) in headers.iter().enumerate() {
        let end = headers
            .get(h + 1)
            .map(|(next, _)| *next)
            .unwrap_or(lines.len());
        let mut segment: Vec<&str> = lines[start + 1..end].to_vec();
        // Rendering separates blocks with one blank line; give it back.
        if h + 1 < headers.len() && segment.last() == Some(&"") {
            segment.pop();
        }
        items.push(ObservationItem {
            label: label.clone(),
            text: segment.join("\n"),
        });
    }
    items
}

/// `Doc 3 - label:` → `Some(Some("label"))`; `Doc 3:` → `Some(None)`;
/// anything else → `None`.
fn parse_doc_header(line: &str) -> Option<Option<String>> {
    let rest = line.strip_prefix("Doc ")?;
    let rest = rest.strip_suffix(':')?;
    match rest.split_once(" - ") {
        Some((num, label)) => {
            num.parse::<u64>().ok()?;
            Some(Some(label.to_string()))
        }
        None => {
            rest.parse::<u64>().ok()?;
            Some(None)
        }
    }
}

/// A complete or in-progress trajectory: the question plus every event
/// produced so far, with token accounting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    pub question: String,
    pub events: Vec<TraceEvent>,
    /// Prompt tokens consumed across all generation calls.
    pub n_in: u64,
    /// Completion tokens produced across all generation calls.
    pub n_out: u64,
}

impl Rollout {
    pub fn new(question: impl Into<String>) -> Self {
        Rollout {
            question: question.into(),
            ..Rollout::default()
        }
    }

    /// All events as protocol text, newline-separated.
    pub fn render_events(&self) -> String {
        self.events
            .iter()
            .map(TraceEvent::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Body parts of the last answer event, if any.
    pub fn final_answer(&self) -> Option<Vec<String>> {
        self.events.iter().rev().find_map(|e| match &e.payload {
            Some(Payload::Answers(parts)) if e.kind == EventKind::Answer => Some(parts.clone()),
            _ => None,
        })
    }
}

/// Serialized form of one rollout: a single JSONL record.
///
/// Field order is fixed so re-serialization is byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    /// Record format version.
    pub schema: u32,
    pub question: String,
    pub events: Vec<EventRecord>,
    pub n_in: u64,
    pub n_out: u64,
    pub final_answer: Option<Vec<String>>,
    /// Whether the final answer matched a gold answer, when judged.
    pub correct: Option<bool>,
    /// Gold answers, when the source problem carries them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golds: Option<Vec<String>>,
}

/// One event in serialized form; payloads re-derive from the body on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub body: String,
}

/// Current rollout record format version.
pub const SCHEMA_VERSION: u32 = 1;

impl RolloutRecord {
    pub fn from_rollout(rollout: &Rollout, correct: Option<bool>) -> Self {
        RolloutRecord {
            schema: SCHEMA_VERSION,
            question: rollout.question.clone(),
            events: rollout
                .events
                .iter()
                .map(|e| EventRecord {
                    kind: e.kind,
                    body: e.body.clone(),
                })
                .collect(),
            n_in: rollout.n_in,
            n_out: rollout.n_out,
            final_answer: rollout.final_answer(),
            correct,
            golds: None,
        }
    }

    /// Reconstructs the in-memory rollout, re-deriving event payloads.
    pub fn to_rollout(&self) -> Rollout {
        Rollout {
            question: self.question.clone(),
            events: self
                .events
                .iter()
                .map(|e| TraceEvent::new(e.kind, e.body.clone()))
                .collect(),
            n_in: self.n_in,
            n_out: self.n_out,
        }
    }
}

/// Writes records as JSONL, one record per line.
pub fn write_jsonl<W: Write>(mut w: W, records: &[RolloutRecord]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSONL records, skipping blank lines. The line number of the first
/// malformed record is reported in the error message.
pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<RolloutRecord>> {
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutRecord = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: {e}", i + 1),
            )
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl_file(path: impl AsRef<Path>, records: &[RolloutRecord]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), records)
}

pub fn read_jsonl_file(path: impl AsRef<Path>) -> std::io::Result<Vec<RolloutRecord>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_queries_trims_and_drops_empties() {
        assert_eq!(split_queries(" a | b|c ").unwrap(), vec!["a", "b", "c"]);
        assert_eq!(split_queries("solo").unwrap(), vec!["solo"]);
        assert_eq!(split_queries("x | | y").unwrap(), vec!["x", "y"]);
    }

    #[test]
    fn split_queries_rejects_blank() {
        assert_eq!(split_queries("").unwrap_err(), TraceError::EmptySearch);
        assert_eq!(split_queries(" | ").unwrap_err(), TraceError::EmptySearch);
    }

    #[test]
    fn observation_renders_with_ordinals_and_labels() {
        let items = vec![
            ObservationItem::new(Some("s1"), "alpha"),
            ObservationItem::new(None, "beta"),
        ];
        assert_eq!(
            render_observation(&items),
            "Doc 1 - s1:\nalpha\n\nDoc 2:\nbeta"
        );
    }

    #[test]
    fn observation_round_trips() {
        let items = vec![
            ObservationItem::new(Some("s1"), "line one\nline two"),
            ObservationItem::new(Some("s2"), "other"),
            ObservationItem::new(None, "tail"),
        ];
        let body = render_observation(&items);
        assert_eq!(parse_observation_body(&body), items);
    }

    #[test]
    fn headerless_observation_is_one_item() {
        assert_eq!(
            parse_observation_body("  plain text  "),
            vec![ObservationItem::new(None, "plain text")]
        );
        assert!(parse_observation_body("   ").is_empty());
    }

    #[test]
    fn doc_header_edge_cases() {
        assert_eq!(parse_doc_header("Doc 12:"), Some(None));
        assert_eq!(
            parse_doc_header("Doc 1 - A - B:"),
            Some(Some("A - B".to_string()))
        );
        assert_eq!(parse_doc_header("Doc one:"), None);
        assert_eq!(parse_doc_header("Doc 1"), None);
        assert_eq!(parse_doc_header("doc 1:"), None);
    }

    #[test]
    fn final_answer_takes_last_answer_event() {
        let mut rollout = Rollout::new("q");
        rollout
            .events
            .push(TraceEvent::new(EventKind::Answer, "first"));
        rollout
            .events
            .push(TraceEvent::new(EventKind::Think, "hmm"));
        rollout
            .events
            .push(TraceEvent::new(EventKind::Answer, "a | b"));
        assert_eq!(
            rollout.final_answer(),
            Some(vec!["a".to_string(), "b".into()])
        );
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let mut rollout = Rollout::new("who?");
        rollout
            .events
            .push(TraceEvent::new(EventKind::Think, "let me see"));
        rollout
            .events
            .push(TraceEvent::new(EventKind::Answer, "them"));
        rollout.n_in = 10;
        rollout.n_out = 4;
        let record = RolloutRecord::from_rollout(&rollout, Some(true));
        let line = serde_json::to_string(&record).unwrap();
        let back: RolloutRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, record);
        assert_eq!(serde_json::to_string(&back).unwrap(), line);
        assert_eq!(back.to_rollout(), rollout);
    }

    #[test]
    fn jsonl_io_round_trips() {
        let records: Vec<RolloutRecord> = (0..3)
            .map(|i| {
                let mut r = Rollout::new(format!("q{i}"));
                r.events
                    .push(TraceEvent::new(EventKind::Answer, format!("a{i}")));
                RolloutRecord::from_rollout(&r, None)
            })
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        let back = read_jsonl(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, records);
    }
}
