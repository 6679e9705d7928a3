//! graphrun: a dependency-graph agent runtime.
//!
//! A policy (an LLM, or a scripted stand-in) decomposes a question into a
//! DAG of sub-tasks; the executor partitions the DAG into execution levels
//! and runs each level as one parallel tool batch — one turn — then the
//! policy writes the answer. The crates around that loop: trace protocol
//! parsing ([`trace`]), the tool registry with reference search/calculator
//! tools ([`toolbox`]), evaluation metrics ([`evalkit`]), and training-data
//! curation ([`datasynth`]).
//!
//! Built with data-parallel batches by default; `--no-default-features`
//! gives a fully sequential build with identical outputs.

pub mod datasynth;
pub mod evalkit;
pub mod executor;
pub mod graph;
pub mod parallel;
pub mod policy;
pub mod tokenize;
pub mod toolbox;
pub mod trace;

pub use evalkit::{exact_match, normalize_answer};
pub use executor::{execute_batch, run, Mode, RunConfig, RunResult, Schedule, Termination};
pub use graph::{topological_levels, validate_dag, DependencyGraph, ExecutionPlan, TaskNode};
pub use policy::{HttpPolicy, HttpPolicyConfig, Policy, ScriptedPolicy};
pub use toolbox::{Corpus, SearchTool, Tool, ToolRegistry};
pub use trace::{
    parse_plan, parse_stream, serialize_graph_dsl, Rollout, RolloutRecord, TraceEvent,
};
