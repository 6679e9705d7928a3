//! The run loop: plan, execute level by level, synthesize.
//!
//! A run has three phases. First the policy writes a plan, which parses to a
//! dependency graph and partitions into execution levels. Then each level
//! becomes one parallel tool batch — one *turn* — either by re-prompting the
//! policy for that level's queries (interactive mode) or by resolving node
//! templates against earlier results (static mode). Finally the policy
//! writes the answer. The turn counter moves only when a batch executes:
//! planning and synthesis are free, and a batch of any width costs exactly
//! one turn, which is what makes wide plans cheaper than chains.

use crate::graph::{resolve_query, topological_levels, DependencyGraph, GraphError};
use crate::parallel::map_capped;
use crate::policy::{Generation, Policy, PolicyError};
use crate::tokenize::TokenizerKind;
use crate::toolbox::{RegistryError, ToolRegistry};
use crate::trace::{
    parse_stream, render_observation, EventKind, ObservationItem, ParserConfig, Payload, Rollout,
    TraceEvent,
};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::sync::mpsc;
use std::time::{Duration, Instant};
use thiserror::Error;

/// How phase 2 gets its queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Re-prompt the policy at each level; execute what it emits.
    #[default]
    Interactive,
    /// Resolve each node's query template against dependency outputs; no
    /// generations between plan and answer.
    Static,
}

/// How a level maps onto batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// One batch per level — the whole point of planning a graph.
    #[default]
    Leveled,
    /// One batch per node: the one-query-per-turn baseline agents without a
    /// plan are stuck with. Static mode only; interactive runs ignore it.
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Turn budget: executed batches allowed before forced synthesis.
    pub max_turns: u32,
    /// Per-generation token cap; longer continuations are cut.
    pub max_gen_tokens: u64,
    /// Per-call tool timeout. `None` waits indefinitely.
    pub tool_timeout_ms: Option<u64>,
    pub mode: Mode,
    /// Most tool calls in flight at once within a batch.
    pub parallelism: usize,
    pub schedule: Schedule,
    pub tokenizer: TokenizerKind,
    /// Static mode: characters of a tool result kept as a placeholder
    /// binding.
    pub binding_max_chars: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_turns: 8,
            max_gen_tokens: 4096,
            tool_timeout_ms: None,
            mode: Mode::Interactive,
            parallelism: 8,
            schedule: Schedule::Leveled,
            tokenizer: TokenizerKind::Whitespace,
            binding_max_chars: 512,
        }
    }
}

impl RunConfig {
    pub fn tool_timeout(&self) -> Option<Duration> {
        self.tool_timeout_ms.map(Duration::from_millis)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_turns == 0 {
            return Err(ConfigError::MaxTurnsZero);
        }
        if self.parallelism == 0 {
            return Err(ConfigError::ParallelismZero);
        }
        if self.max_gen_tokens == 0 {
            return Err(ConfigError::TokenCapZero);
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("max_turns must be at least 1")]
    MaxTurnsZero,
    #[error("parallelism must be at least 1")]
    ParallelismZero,
    #[error("max_gen_tokens must be at least 1")]
    TokenCapZero,
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The policy produced a final answer.
    Answered,
    /// The turn budget ran out and the forced synthesis that follows did not
    /// answer.
    BudgetExhausted,
    /// A generation failed or was unusable outside planning.
    PolicyError,
    /// The registry could not serve the plan (unknown tool, unresolvable
    /// template).
    ToolFatal,
    /// The first generation contained no parsable plan.
    PlanParseFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Answered => "answered",
            Termination::BudgetExhausted => "budget_exhausted",
            Termination::PolicyError => "policy_error",
            Termination::ToolFatal => "tool_fatal",
            Termination::PlanParseFailure => "plan_parse_failure",
        })
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub rollout: Rollout,
    pub final_answer: Option<Vec<String>>,
    pub turns_used: u32,
    pub wall_time: Duration,
    pub termination: Termination,
    /// True when the policy's searches diverged from the plan (a level with
    /// no queries, or a batch width different from the level size).
    pub divergence: bool,
    /// Human-readable detail for non-Answered terminations.
    pub failure: Option<String>,
}

/// One tool invocation of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub tool: String,
    pub query: String,
}

impl ToolCall {
    pub fn new(tool: impl Into<String>, query: impl Into<String>) -> Self {
        ToolCall {
            tool: tool.into(),
            query: query.into(),
        }
    }
}

/// Outcome of one call. Failures are text so they can sit in an observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResult {
    pub ok: bool,
    pub text: String,
}

/// Runs every call of a batch, at most `cap` in flight, results in input
/// order.
///
/// Per-call failures — tool errors, timeouts, panics — come back as
/// `ok: false` results; the batch always completes. The only hard error is a
/// call naming a tool the registry does not have, detected up front before
/// anything runs.
///
/// A timed-out call's worker thread is abandoned (it cannot be cancelled);
/// its eventual result is discarded.
pub fn execute_batch(
    calls: &[ToolCall],
    tools: &ToolRegistry,
    timeout: Option<Duration>,
    cap: usize,
) -> Result<Vec<ToolResult>, RegistryError> {
    let entries = calls
        .iter()
        .map(|call| Ok((tools.entry(&call.tool)?, call)))
        .collect::<Result<Vec<_>, RegistryError>>()?;
    Ok(map_capped(entries, cap, |(entry, call)| {
        let outcome = match timeout {
            None => entry.call(&call.query),
            Some(limit) => {
                let (tx, rx) = mpsc::channel();
                let query = call.query.clone();
                std::thread::spawn(move || {
                    let _ = tx.send(entry.call(&query));
                });
                match rx.recv_timeout(limit) {
                    Ok(result) => result,
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        return ToolResult {
                            ok: false,
                            text: format!("error: tool `{}` timeout after {limit:?}", call.tool),
                        }
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => {
                        return ToolResult {
                            ok: false,
                            text: format!("error: tool `{}` panicked", call.tool),
                        }
                    }
                }
            }
        };
        match outcome {
            Ok(text) => ToolResult { ok: true, text },
            Err(e) => ToolResult {
                ok: false,
                text: format!("error: {e}"),
            },
        }
    }))
}

/// Drives one question through plan → execution → synthesis.
///
/// `Err` means the config itself is invalid; every runtime outcome, including
/// failures, is a `RunResult` with the appropriate termination.
pub fn run(
    question: &str,
    policy: &mut dyn Policy,
    tools: &ToolRegistry,
    config: &RunConfig,
) -> Result<RunResult, ConfigError> {
    config.validate()?;
    let mut driver = Driver {
        policy,
        tools,
        config,
        rollout: Rollout::new(question),
        turns: 0,
        divergence: false,
        started: Instant::now(),
    };
    Ok(driver.run())
}

struct Driver<'a> {
    policy: &'a mut dyn Policy,
    tools: &'a ToolRegistry,
    config: &'a RunConfig,
    rollout: Rollout,
    turns: u32,
    divergence: bool,
    started: Instant,
}

/// Interrupts the phase flow; `finish` turns it into a result.
enum Halt {
    Done(Termination, Option<String>),
}

impl Driver<'_> {
    fn run(&mut self) -> RunResult {
        match self.phases() {
            Ok(()) => self.finish(Termination::Answered, None),
            Err(Halt::Done(termination, failure)) => self.finish(termination, failure),
        }
    }

    fn phases(&mut self) -> Result<(), Halt> {
        // Phase 1: planning.
        let appended = self.generate_into_rollout("</plan>", Phase::Planning)?;
        if self.answer_in(appended) {
            return Ok(());
        }
        let graph = self.rollout.events[appended..]
            .iter()
            .rev()
            .find_map(|e| match &e.payload {
                Some(Payload::Plan(g)) if e.kind == EventKind::Plan => Some(g.clone()),
                _ => None,
            })
            .ok_or_else(|| {
                Halt::Done(
                    Termination::PlanParseFailure,
                    Some("first generation contained no parsable plan".to_string()),
                )
            })?;
        let levels = topological_levels(&graph).map_err(|e| {
            // parse_plan validated already; reaching here means a cycle
            // slipped through a hand-built graph.
            Halt::Done(Termination::PlanParseFailure, Some(e.to_string()))
        })?;

        // The plan must be executable before anything runs.
        for node in graph.nodes() {
            if !self.tools.contains(&node.tool_name) {
                return Err(Halt::Done(
                    Termination::ToolFatal,
                    Some(RegistryError::UnknownTool(node.tool_name.clone()).to_string()),
                ));
            }
        }

        // Phase 2: level-wise execution.
        let budget_cut = match self.config.mode {
            Mode::Static => self.execute_static(&graph, levels.levels())?,
            Mode::Interactive => self.execute_interactive(&graph, levels.levels())?,
        };
        // An interactive policy may answer mid-execution instead of
        // searching; that ends the run without a synthesis call.
        if self.answer_in(0) {
            return Ok(());
        }

        // Phase 3: synthesis — runs even when the budget was cut, giving the
        // policy one chance to answer from what it has.
        let appended = self
            .generate_into_rollout("</answer>", Phase::synthesis(budget_cut))
            .map_err(|halt| match halt {
                // A budget-cut run whose policy cannot produce the forced
                // synthesis (script ran dry, endpoint refused) is still just
                // an exhausted budget.
                Halt::Done(Termination::PolicyError, detail) if budget_cut => {
                    Halt::Done(Termination::BudgetExhausted, detail)
                }
                other => other,
            })?;
        if self.answer_in(appended) {
            return Ok(());
        }
        Err(if budget_cut {
            Halt::Done(
                Termination::BudgetExhausted,
                Some(format!("turn budget {} exhausted", self.config.max_turns)),
            )
        } else {
            Halt::Done(
                Termination::PolicyError,
                Some("synthesis produced no answer".to_string()),
            )
        })
    }

    /// Static phase 2. Returns whether the budget cut the run short.
    fn execute_static(
        &mut self,
        graph: &DependencyGraph,
        levels: &[Vec<String>],
    ) -> Result<bool, Halt> {
        let mut bindings: IndexMap<String, String> = IndexMap::new();
        for level in levels {
            let batches: Vec<&[String]> = match self.config.schedule {
                Schedule::Leveled => vec![level.as_slice()],
                Schedule::PerNode => level.chunks(1).collect(),
            };
            for batch in batches {
                if self.turns >= self.config.max_turns {
                    return Ok(true);
                }
                let mut calls = Vec::with_capacity(batch.len());
                for id in batch {
                    let node = graph.get(id).expect("level ids come from the graph");
                    let query = resolve_query(node, &bindings).map_err(|e: GraphError| {
                        Halt::Done(Termination::ToolFatal, Some(e.to_string()))
                    })?;
                    calls.push(ToolCall::new(node.tool_name.clone(), query));
                }
                self.rollout.events.push(TraceEvent::new(
                    EventKind::Search,
                    calls
                        .iter()
                        .map(|c| c.query.as_str())
                        .collect::<Vec<_>>()
                        .join(" | "),
                ));
                let results = self.run_batch(&calls)?;
                for (id, result) in batch.iter().zip(&results) {
                    let mut text = result.text.clone();
                    text.truncate(floor_char_boundary(&text, self.config.binding_max_chars));
                    bindings.insert(id.clone(), text);
                }
                self.observe(batch.iter().map(String::as_str), &results);
                self.turns += 1;
            }
        }
        Ok(false)
    }

    /// Interactive phase 2. Returns whether the budget cut the run short.
    fn execute_interactive(
        &mut self,
        graph: &DependencyGraph,
        levels: &[Vec<String>],
    ) -> Result<bool, Halt> {
        for level in levels {
            if self.turns >= self.config.max_turns {
                return Ok(true);
            }
            let appended = self.generate_into_rollout("</search>", Phase::Execution)?;
            if self.answer_in(appended) {
                return Ok(false);
            }
            let queries: Vec<String> = self.rollout.events[appended..]
                .iter()
                .filter_map(|e| match &e.payload {
                    Some(Payload::Queries(qs)) if e.kind == EventKind::Search => Some(qs.clone()),
                    _ => None,
                })
                .flatten()
                .collect();
            if queries.is_empty() {
                // The policy had nothing to ask here. Note it and move on;
                // synthesis may still succeed.
                self.divergence = true;
                continue;
            }
            // When the batch matches the level, each query runs on its
            // node's tool and results carry node labels. A diverging batch
            // falls back to plain search with unlabelled results.
            let calls: Vec<ToolCall>;
            let labels: Vec<Option<&str>>;
            if queries.len() == level.len() {
                calls = level
                    .iter()
                    .zip(&queries)
                    .map(|(id, q)| {
                        let node = graph.get(id).expect("level ids come from the graph");
                        ToolCall::new(node.tool_name.clone(), q.clone())
                    })
                    .collect();
                labels = level.iter().map(|id| Some(id.as_str())).collect();
            } else {
                self.divergence = true;
                calls = queries
                    .iter()
                    .map(|q| ToolCall::new("search", q.clone()))
                    .collect();
                labels = vec![None; queries.len()];
            }
            let results = self.run_batch(&calls)?;
            let items: Vec<ObservationItem> = labels
                .iter()
                .zip(&results)
                .map(|(label, r)| ObservationItem::new(*label, r.text.clone()))
                .collect();
            self.rollout.events.push(TraceEvent::new(
                EventKind::Observation,
                render_observation(&items),
            ));
            self.turns += 1;
        }
        Ok(false)
    }

    fn run_batch(&mut self, calls: &[ToolCall]) -> Result<Vec<ToolResult>, Halt> {
        execute_batch(
            calls,
            self.tools,
            self.config.tool_timeout(),
            self.config.parallelism,
        )
        .map_err(|e| Halt::Done(Termination::ToolFatal, Some(e.to_string())))
    }

    fn observe<'i>(&mut self, labels: impl Iterator<Item = &'i str>, results: &[ToolResult]) {
        let items: Vec<ObservationItem> = labels
            .zip(results)
            .map(|(label, r)| ObservationItem::new(Some(label), r.text.clone()))
            .collect();
        self.rollout.events.push(TraceEvent::new(
            EventKind::Observation,
            render_observation(&items),
        ));
    }

    /// One policy call: generate until `marker`, account tokens, parse, and
    /// append the events. Returns the index the new events start at.
    fn generate_into_rollout(&mut self, marker: &str, phase: Phase) -> Result<usize, Halt> {
        let before = self.rollout.events.len();
        let tokenizer = self.config.tokenizer;
        let prompt_tokens = tokenizer.count(&self.rollout.question)
            + tokenizer.count(&self.rollout.render_events());
        let generation = self
            .policy
            .generate(&self.rollout.question, &self.rollout, &[marker])
            .map_err(|e: PolicyError| phase.policy_failure(e.to_string()))?;
        let Generation { text, n_in, n_out } = generation;
        let text = tokenizer.truncate(&text, self.config.max_gen_tokens);
        self.rollout.n_in += n_in.unwrap_or(prompt_tokens);
        self.rollout.n_out += n_out.unwrap_or_else(|| tokenizer.count(text));

        let outcome = parse_stream(text, &ParserConfig::default())
            .map_err(|e| phase.policy_failure(e.to_string()))?;
        let mut events = outcome.events;
        if let Some(partial) = outcome.incomplete {
            // Generation stopped at the close marker (hosted endpoints eat
            // stop sequences) or at the token cap. If the dangling tag is
            // the one this phase was waiting to close, close it; otherwise
            // the fragment is unusable.
            if format!("</{}>", partial.kind.tag()) == marker {
                events.push(TraceEvent::new(partial.kind, partial.partial_body));
            }
        }
        self.rollout.events.extend(events);
        Ok(before)
    }

    /// Did events appended at or after `from` include an answer?
    fn answer_in(&self, from: usize) -> bool {
        self.rollout.events[from..]
            .iter()
            .any(|e| e.kind == EventKind::Answer && e.payload.is_some())
    }

    fn finish(&mut self, termination: Termination, failure: Option<String>) -> RunResult {
        let final_answer = match termination {
            Termination::Answered => self.rollout.final_answer(),
            _ => None,
        };
        debug_assert_eq!(final_answer.is_some(), termination == Termination::Answered);
        RunResult {
            rollout: std::mem::take(&mut self.rollout),
            final_answer,
            turns_used: self.turns,
            wall_time: self.started.elapsed(),
            termination,
            divergence: self.divergence,
            failure,
        }
    }
}

/// Which phase a generation serves; decides how its failure is classified.
#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Planning,
    Execution,
    Synthesis,
    /// Synthesis forced by an exhausted budget.
    ForcedSynthesis,
}

impl Phase {
    fn synthesis(budget_cut: bool) -> Phase {
        if budget_cut {
            Phase::ForcedSynthesis
        } else {
            Phase::Synthesis
        }
    }

    fn policy_failure(self, detail: String) -> Halt {
        let termination = match self {
            Phase::Planning => Termination::PlanParseFailure,
            Phase::ForcedSynthesis => Termination::BudgetExhausted,
            Phase::Execution | Phase::Synthesis => Termination::PolicyError,
        };
        Halt::Done(termination, Some(detail))
    }
}

/// Largest byte index ≤ `at` that lands on a char boundary.
fn floor_char_boundary(text: &str, at: usize) -> usize {
    if at >= text.len() {
        return text.len();
    }
    let mut i = at;
    while !text.is_char_boundary(i) {
        i -= 1;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ScriptedPolicy;
    use crate::toolbox::{FnTool, ToolError};

    fn stub_search() -> Box<dyn crate::toolbox::Tool> {
        Box::new(FnTool::new("search", |q| Ok(format!("results for [{q}]"))))
    }

    fn atlas_tools() -> ToolRegistry {
        ToolRegistry::new()
            .with(Box::new(FnTool::new("search", |q: &str| {
                Ok(match q {
                    "capital of France" => "Paris".to_string(),
                    "capital of Germany" => "Berlin".to_string(),
                    "population of Paris" => "2.1 million".to_string(),
                    "population of Berlin" => "3.6 million".to_string(),
                    other => format!("no entry for {other}"),
                })
            })))
            .unwrap()
    }

    const DSL_PLAN: &str = "<plan>\
<node id=\"s1\">search(\"capital of France\")</node>\
<node id=\"s2\">search(\"capital of Germany\")</node>\
<node id=\"s3\" depends=\"s1\">search(\"population of {s1}\")</node>\
<node id=\"s4\" depends=\"s2\">search(\"population of {s2}\")</node>\
</plan>";

    fn static_config() -> RunConfig {
        RunConfig {
            mode: Mode::Static,
            ..RunConfig::default()
        }
    }

    #[test]
    fn static_mode_resolves_bindings_level_by_level() {
        let script = format!("{DSL_PLAN}<answer>done</answer>");
        let mut policy = ScriptedPolicy::from_chunks([script]);
        let result = run("q", &mut policy, &atlas_tools(), &static_config()).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        assert_eq!(result.turns_used, 2);
        assert!(!result.divergence);
        let rendered = result.rollout.render_events();
        // s3's template resolved against s1's result.
        assert!(rendered.contains("population of Paris"), "{rendered}");
        assert!(rendered.contains("population of Berlin"));
        assert!(rendered.contains("Doc 1 - s3:\n2.1 million"));
    }

    #[test]
    fn per_node_schedule_spends_one_turn_per_node() {
        let script = format!("{DSL_PLAN}<answer>done</answer>");
        let mut policy = ScriptedPolicy::from_chunks([script]);
        let config = RunConfig {
            schedule: Schedule::PerNode,
            ..static_config()
        };
        let result = run("q", &mut policy, &atlas_tools(), &config).unwrap();
        assert_eq!(result.turns_used, 4);
        assert_eq!(result.termination, Termination::Answered);
    }

    #[test]
    fn budget_cuts_static_run_after_first_level() {
        let plan = "<plan>Task 1: a\n- Dependencies: none\n\
                    Task 2: b\n- Dependencies: Task 1\n\
                    Task 3: c\n- Dependencies: Task 2</plan>";
        let mut policy = ScriptedPolicy::from_chunks([plan.to_string()]);
        let config = RunConfig {
            max_turns: 1,
            ..static_config()
        };
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &config).unwrap();
        assert_eq!(result.termination, Termination::BudgetExhausted);
        assert_eq!(result.turns_used, 1);
        assert!(result.final_answer.is_none());
    }

    #[test]
    fn forced_synthesis_can_still_answer() {
        let plan = "<plan>Task 1: a\n- Dependencies: none\n\
                    Task 2: b\n- Dependencies: Task 1</plan>";
        let mut policy = ScriptedPolicy::from_chunks([
            plan.to_string(),
            "<answer>salvaged</answer>".to_string(),
        ]);
        let config = RunConfig {
            max_turns: 1,
            ..static_config()
        };
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &config).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        assert_eq!(result.final_answer, Some(vec!["salvaged".to_string()]));
        assert_eq!(result.turns_used, 1);
    }

    #[test]
    fn interactive_executes_what_the_policy_asks() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<think>two then one</think><plan>Task 1: a\n- Dependencies: none\n\
             Task 2: b\n- Dependencies: none\n\
             Task 3: c\n- Dependencies: Task 1, Task 2</plan>"
                .to_string(),
            "<search>alpha | beta</search>".to_string(),
            "<search>gamma</search>".to_string(),
            "<answer>done</answer>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        assert_eq!(result.turns_used, 2);
        assert!(!result.divergence);
        let rendered = result.rollout.render_events();
        assert!(rendered.contains("Doc 1 - Task1:\nresults for [alpha]"));
        assert!(rendered.contains("Doc 2 - Task2:\nresults for [beta]"));
        assert!(rendered.contains("Doc 1 - Task3:\nresults for [gamma]"));
    }

    #[test]
    fn answer_during_execution_ends_the_run() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: a\n- Dependencies: none\n\
             Task 2: b\n- Dependencies: Task 1</plan>"
                .to_string(),
            "<search>first hop</search>".to_string(),
            "<think>enough</think><answer>early</answer>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        assert_eq!(result.final_answer, Some(vec!["early".to_string()]));
        assert_eq!(result.turns_used, 1);
    }

    #[test]
    fn width_mismatch_sets_divergence_and_drops_labels() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: a\n- Dependencies: none\n\
             Task 2: b\n- Dependencies: none</plan>"
                .to_string(),
            "<search>only one query</search>".to_string(),
            "<answer>x</answer>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert!(result.divergence);
        assert_eq!(result.turns_used, 1);
        let rendered = result.rollout.render_events();
        assert!(rendered.contains("Doc 1:\nresults for [only one query]"));
    }

    #[test]
    fn searchless_generation_skips_level_with_divergence() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: a\n- Dependencies: none</plan>".to_string(),
            "<reflection>not sure what to ask</reflection>".to_string(),
            "<answer>guess</answer>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert!(result.divergence);
        assert_eq!(result.turns_used, 0);
        assert_eq!(result.termination, Termination::Answered);
    }

    #[test]
    fn unparsable_plan_is_plan_parse_failure() {
        let mut policy =
            ScriptedPolicy::from_chunks(["<plan>no recognizable tasks</plan>".to_string()]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::PlanParseFailure);
        assert!(result.failure.is_some());
        assert_eq!(result.turns_used, 0);
    }

    #[test]
    fn missing_tool_is_fatal_before_any_batch() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan><node id=\"s1\">oracle(\"x\")</node></plan>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &static_config()).unwrap();
        assert_eq!(result.termination, Termination::ToolFatal);
        assert_eq!(result.turns_used, 0);
    }

    #[test]
    fn per_call_tool_failure_is_soft() {
        let tools = ToolRegistry::new()
            .with(Box::new(FnTool::new("search", |q: &str| {
                if q.contains("bad") {
                    Err(ToolError::Other("backend unavailable".to_string()))
                } else {
                    Ok("fine".to_string())
                }
            })))
            .unwrap();
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: a\n- Dependencies: none\n\
             Task 2: bad one\n- Dependencies: none</plan>"
                .to_string(),
            "<search>good | bad</search>".to_string(),
            "<answer>survived</answer>".to_string(),
        ]);
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        let rendered = result.rollout.render_events();
        assert!(
            rendered.contains("error: backend unavailable"),
            "{rendered}"
        );
    }

    #[test]
    fn answer_in_first_generation_short_circuits() {
        let mut policy =
            ScriptedPolicy::from_chunks(["<answer>already known</answer>".to_string()]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        assert_eq!(result.turns_used, 0);
    }

    #[test]
    fn script_exhaustion_after_budget_cut_reads_as_budget() {
        let plan = "<plan>Task 1: a\n- Dependencies: none\n\
                    Task 2: b\n- Dependencies: Task 1</plan>";
        let mut policy = ScriptedPolicy::from_chunks([plan.to_string()]);
        let config = RunConfig {
            max_turns: 1,
            ..static_config()
        };
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &config).unwrap();
        assert_eq!(result.termination, Termination::BudgetExhausted);
    }

    #[test]
    fn stripped_stop_marker_tag_is_closed_by_executor() {
        // A hosted endpoint returns the plan body without its close tag.
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: find it\n- Dependencies: none".to_string(),
            "<search>find it</search>".to_string(),
            "<answer>found</answer>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("q", &mut policy, &tools, &RunConfig::default()).unwrap();
        assert_eq!(result.termination, Termination::Answered);
        assert_eq!(result.turns_used, 1);
    }

    #[test]
    fn token_cap_truncates_generation() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: one two three four five six seven\n- Dependencies: none</plan>"
                .to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let config = RunConfig {
            max_gen_tokens: 4,
            mode: Mode::Static,
            ..RunConfig::default()
        };
        let result = run("q", &mut policy, &tools, &config).unwrap();
        // The cap chopped the plan mid-tag; the partial still parses as a
        // plan because the cut tag matches the phase marker.
        assert_eq!(result.rollout.n_out, 4);
        assert_eq!(result.termination, Termination::PolicyError);
        let plan_event = &result.rollout.events[0];
        assert_eq!(plan_event.kind, EventKind::Plan);
        assert_eq!(plan_event.body, "Task 1: one two");
    }

    #[test]
    fn token_accounting_grows_with_context() {
        let mut policy = ScriptedPolicy::from_chunks([
            "<plan>Task 1: a\n- Dependencies: none</plan>".to_string(),
            "<search>alpha</search>".to_string(),
            "<answer>done</answer>".to_string(),
        ]);
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let result = run("what is it", &mut policy, &tools, &RunConfig::default()).unwrap();
        // Three generations, each re-reading question + events so far.
        assert!(result.rollout.n_in > 3 * 3, "n_in={}", result.rollout.n_in);
        assert!(result.rollout.n_out > 0);
    }

    #[test]
    fn timeout_turns_into_soft_error_result() {
        let tools = ToolRegistry::new()
            .with(Box::new(FnTool::new("search", |q: &str| {
                if q == "slow" {
                    std::thread::sleep(Duration::from_millis(500));
                }
                Ok("ok".to_string())
            })))
            .unwrap();
        let calls = vec![
            ToolCall::new("search", "fast"),
            ToolCall::new("search", "slow"),
        ];
        let results = execute_batch(&calls, &tools, Some(Duration::from_millis(50)), 2).unwrap();
        assert!(results[0].ok);
        assert!(!results[1].ok);
        assert!(results[1].text.contains("timeout"));
    }

    #[test]
    fn batch_results_keep_input_order() {
        let tools = ToolRegistry::new()
            .with(Box::new(FnTool::new("search", |q: &str| {
                // Earlier calls sleep longer, so completion order reverses.
                let ms: u64 = q.parse().unwrap();
                std::thread::sleep(Duration::from_millis(40 - ms * 10));
                Ok(q.to_string())
            })))
            .unwrap();
        let calls: Vec<ToolCall> = (0..4)
            .map(|i| ToolCall::new("search", i.to_string()))
            .collect();
        let results = execute_batch(&calls, &tools, None, 4).unwrap();
        let texts: Vec<&str> = results.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, vec!["0", "1", "2", "3"]);
    }

    #[test]
    fn unknown_tool_in_batch_is_fatal_upfront() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let ran = Arc::new(AtomicUsize::new(0));
        let ran_clone = ran.clone();
        let tools = ToolRegistry::new()
            .with(Box::new(FnTool::new("search", move |_q: &str| {
                ran_clone.fetch_add(1, Ordering::SeqCst);
                Ok("x".to_string())
            })))
            .unwrap();
        let calls = vec![ToolCall::new("search", "a"), ToolCall::new("ghost", "b")];
        let err = execute_batch(&calls, &tools, None, 2).unwrap_err();
        assert_eq!(err, RegistryError::UnknownTool("ghost".into()));
        assert_eq!(
            ran.load(Ordering::SeqCst),
            0,
            "nothing may run on preflight failure"
        );
    }

    #[test]
    fn empty_batch_is_empty_result() {
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        assert_eq!(execute_batch(&[], &tools, None, 4).unwrap(), Vec::new());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let tools = ToolRegistry::new().with(stub_search()).unwrap();
        let mut policy = ScriptedPolicy::from_chunks(["<answer>x</answer>".to_string()]);
        for (config, expect) in [
            (
                RunConfig {
                    max_turns: 0,
                    ..RunConfig::default()
                },
                ConfigError::MaxTurnsZero,
            ),
            (
                RunConfig {
                    parallelism: 0,
                    ..RunConfig::default()
                },
                ConfigError::ParallelismZero,
            ),
            (
                RunConfig {
                    max_gen_tokens: 0,
                    ..RunConfig::default()
                },
                ConfigError::TokenCapZero,
            ),
        ] {
            assert_eq!(run("q", &mut policy, &tools, &config).unwrap_err(), expect);
        }
    }
}
