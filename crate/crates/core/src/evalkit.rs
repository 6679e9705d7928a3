//! Correctness and efficiency metrics.
//!
//! Exact Match with open-domain-QA normalization, the binary reward built on
//! it, token cost-of-pass, and the per-dataset aggregation (mean accuracy,
//! mean turns, response length, turn CDF) with JSON/JSONL/CSV export.

use crate::executor::{run, RunConfig, Termination};
use crate::parallel::map_capped;
use crate::policy::Policy;
use crate::toolbox::ToolRegistry;
use crate::trace::{Rollout, RolloutRecord};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no records to aggregate")]
    EmptyRecordSet,
}

/// Canonical answer form: lowercase, punctuation deleted, whitespace
/// collapsed, leading articles (a/an/the) dropped.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let mut tokens: Vec<&str> = stripped.split_whitespace().collect();
    while matches!(tokens.first(), Some(&"a") | Some(&"an") | Some(&"the")) {
        tokens.remove(0);
    }
    tokens.join(" ")
}

/// 1 iff any `|`-separated candidate in the prediction normalizes to any
/// normalized gold.
pub fn exact_match(prediction: &str, gold: &[String]) -> u8 {
    let golds: Vec<String> = gold.iter().map(|g| normalize_answer(g)).collect();
    let hit = prediction
        .split('|')
        .map(normalize_answer)
        .any(|candidate| golds.contains(&candidate));
    hit as u8
}

/// The binary outcome reward: exact match on the rollout's final answer,
/// 0 when it never answered.
pub fn reward(rollout: &Rollout, gold: &[String]) -> u8 {
    match rollout.final_answer() {
        Some(candidates) => exact_match(&candidates.join(" | "), gold),
        None => 0,
    }
}

/// Expected token cost per correct solution: `(n_in + n_out) / success_rate`.
/// Undefined (None) when nothing succeeds — cost of a pass that never comes.
pub fn cost_of_pass(n_in: u64, n_out: u64, success_rate: f64) -> Option<f64> {
    debug_assert!(
        (0.0..=1.0).contains(&success_rate),
        "success rate is a fraction"
    );
    if success_rate <= 0.0 {
        return None;
    }
    Some((n_in + n_out) as f64 / success_rate)
}

/// One problem's evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub problem_id: String,
    pub em: u8,
    pub reward: u8,
    pub n_in: u64,
    pub n_out: u64,
    pub turns: u32,
    pub wall_time_secs: f64,
    /// `(n_in + n_out) / em` for this problem; absent when unsolved.
    pub cost_of_pass: Option<f64>,
    pub termination: Termination,
}

/// Dataset-level summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub problems: usize,
    pub mean_em: f64,
    pub mean_turns: f64,
    /// Mean completion tokens — the "response length" statistic.
    pub mean_response_length: f64,
    pub mean_wall_time_secs: f64,
    /// `turn_cdf[t-1]` = fraction of all problems solved within ≤ t turns,
    /// for t = 1..=max turns observed.
    pub turn_cdf: Vec<f64>,
    /// Corpus cost-of-pass: mean tokens over mean success rate.
    pub cost_of_pass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub aggregates: Aggregates,
    pub records: Vec<ProblemRecord>,
}

/// Folds per-problem records into dataset aggregates.
pub fn aggregate(records: &[ProblemRecord]) -> Result<Aggregates, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecordSet);
    }
    let n = records.len() as f64;
    let mean_em = records.iter().map(|r| r.em as f64).sum::<f64>() / n;
    let mean_turns = records.iter().map(|r| r.turns as f64).sum::<f64>() / n;
    let mean_response_length = records.iter().map(|r| r.n_out as f64).sum::<f64>() / n;
    let mean_wall_time_secs = records.iter().map(|r| r.wall_time_secs).sum::<f64>() / n;
    let max_turns = records.iter().map(|r| r.turns).max().unwrap_or(0);
    let turn_cdf = (1..=max_turns)
        .map(|t| records.iter().filter(|r| r.em == 1 && r.turns <= t).count() as f64 / n)
        .collect();
    let mean_n_in = records.iter().map(|r| r.n_in as f64).sum::<f64>() / n;
    let cost_of_pass = if mean_em > 0.0 {
        Some((mean_n_in + mean_response_length) / mean_em)
    } else {
        None
    };
    Ok(Aggregates {
        problems: records.len(),
        mean_em,
        mean_turns,
        mean_response_length,
        mean_wall_time_secs,
        turn_cdf,
        cost_of_pass,
    })
}

/// One dataset entry: a question, its gold answers, and optionally the
/// scripted generations that replay a recorded trajectory offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProblem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub golds: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<String>>,
}

/// Loads a JSONL dataset, one problem per line.
pub fn read_problems<R: BufRead>(reader: R) -> std::io::Result<Vec<EvalProblem>> {
    let mut problems = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: EvalProblem = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: {e}", i + 1),
            )
        })?;
        problems.push(problem);
    }
    Ok(problems)
}

/// An evaluation pass over a dataset: the report plus every rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub rollouts: Vec<RolloutRecord>,
}

/// Runs every problem through the executor and scores the outcomes.
///
/// `make_policy` builds one policy per problem (policies are stateful).
/// Problems run with at most `jobs` in parallel; records come back in
/// dataset order either way.
pub fn evaluate<F>(
    problems: &[EvalProblem],
    make_policy: F,
    tools: &ToolRegistry,
    config: &RunConfig,
    jobs: usize,
) -> Result<EvalOutcome, EvalError>
where
    F: Fn(&EvalProblem) -> Box<dyn Policy> + Sync,
{
    if problems.is_empty() {
        return Err(EvalError::EmptyRecordSet);
    }
    let indexed: Vec<(usize, &EvalProblem)> = problems.iter().enumerate().collect();
    let outcomes = map_capped(indexed, jobs.max(1), |(i, problem)| {
        let mut policy = make_policy(problem);
        let result = run(&problem.question, policy.as_mut(), tools, config)
            .expect("eval uses a validated config");
        let em = reward(&result.rollout, &problem.golds);
        let mut rollout_record = RolloutRecord::from_rollout(&result.rollout, Some(em == 1));
        rollout_record.golds = Some(problem.golds.clone());
        let record = ProblemRecord {
            problem_id: problem
                .id
                .clone()
                .unwrap_or_else(|| format!("p{:04}", i + 1)),
            em,
            reward: em,
            n_in: result.rollout.n_in,
            n_out: result.rollout.n_out,
            turns: result.turns_used,
            wall_time_secs: result.wall_time.as_secs_f64(),
            cost_of_pass: cost_of_pass(result.rollout.n_in, result.rollout.n_out, em as f64),
            termination: result.termination,
        };
        (record, rollout_record)
    });
    let (records, rollouts): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let aggregates = aggregate(&records)?;
    Ok(EvalOutcome {
        report: EvalReport {
            schema: crate::trace::SCHEMA_VERSION,
            aggregates,
            records,
        },
        rollouts,
    })
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, w: W) -> std::io::Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(std::io::Error::from)
    }

    /// Per-problem records as JSONL.
    pub fn write_records_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Turn-CDF plot data: `turns,fraction_solved` rows.
    pub fn write_turn_cdf_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "turns,fraction_solved")?;
        for (i, fraction) in self.aggregates.turn_cdf.iter().enumerate() {
            writeln!(w, "{},{fraction}", i + 1)?;
        }
        Ok(())
    }

    /// Response-length histogram plot data: `bucket_start,bucket_end,count`
    /// rows over n_out, bucket width 64 tokens.
    pub fn write_length_hist_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        const WIDTH: u64 = 64;
        writeln!(w, "bucket_start,bucket_end,count")?;
        let max = self.records.iter().map(|r| r.n_out).max().unwrap_or(0);
        let buckets = max / WIDTH + 1;
        for b in 0..buckets {
            let (lo, hi) = (b * WIDTH, (b + 1) * WIDTH);
            let count = self
                .records
                .iter()
                .filter(|r| r.n_out >= lo && r.n_out < hi)
                .count();
            writeln!(w, "{lo},{hi},{count}")?;
        }
        Ok(())
    }
}
