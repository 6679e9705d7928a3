//! Trajectory curation and SFT export.
//!
//! Recorded rollouts pass through three filters — enough searches, not too
//! long, and a target ratio of parallel-search to sequential-search samples
//! — then export as SFT text with loss masks covering every observation
//! block, so tool output never contributes to the training loss.

use crate::evalkit::EvalProblem;
use crate::executor::RunConfig;
use crate::policy::Policy;
use crate::tokenize::TokenizerKind;
use crate::toolbox::ToolRegistry;
use crate::trace::{parse_stream, EventKind, ParserConfig, Payload, Rollout, RolloutRecord};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasynthError {
    /// Balancing needs both a parallel and a sequential sample to exist.
    #[error("cannot balance: the {0} class is empty")]
    OneClassEmpty(&'static str),
    /// An exported mask did not re-parse to the source observations.
    #[error("mask misalignment: {0}")]
    SerializationMismatch(String),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
}

/// One recorded rollout with the derived features the filters look at.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rollout: Rollout,
    pub gold: Vec<String>,
    /// Number of search events.
    pub search_count: usize,
    /// Whether any search event carried two or more queries.
    pub uses_parallel: bool,
    /// Tokens in question + serialized events.
    pub token_length: u64,
}

impl Trajectory {
    pub fn new(rollout: Rollout, gold: Vec<String>, tokenizer: TokenizerKind) -> Self {
        let search_count = rollout
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Search)
            .count();
        let uses_parallel = rollout.events.iter().any(|e| {
            matches!(&e.payload, Some(Payload::Queries(qs)) if e.kind == EventKind::Search && qs.len() >= 2)
        });
        let token_length =
            tokenizer.count(&rollout.question) + tokenizer.count(&rollout.render_events());
        Trajectory {
            rollout,
            gold,
            search_count,
            uses_parallel,
            token_length,
        }
    }

    pub fn from_record(record: &RolloutRecord, tokenizer: TokenizerKind) -> Self {
        Trajectory::new(
            record.to_rollout(),
            record.golds.clone().unwrap_or_default(),
            tokenizer,
        )
    }
}

/// Keep iff the trajectory searched at least `min_searches` times. Fewer
/// means the question was too simple to teach decomposition.
pub fn filter_complexity(t: &Trajectory, min_searches: usize) -> bool {
    t.search_count >= min_searches
}

/// Keep iff the trajectory fits in `max_tokens`.
pub fn filter_length(t: &Trajectory, max_tokens: u64) -> bool {
    t.token_length <= max_tokens
}

/// Down-samples the over-represented class until parallel : sequential sits
/// at `parallel_frac : 1 − parallel_frac` (±1 sample), keeping as many
/// trajectories as that allows.
///
/// Selection within the shrunk class is seeded-uniform; survivor order is
/// input order; the under-represented class is never touched.
pub fn balance_ratio(
    trajectories: Vec<Trajectory>,
    parallel_frac: f64,
    seed: u64,
) -> Result<Vec<Trajectory>, DatasynthError> {
    let parallel_total = trajectories.iter().filter(|t| t.uses_parallel).count();
    let sequential_total = trajectories.len() - parallel_total;
    if parallel_total == 0 {
        return Err(DatasynthError::OneClassEmpty("parallel"));
    }
    if sequential_total == 0 {
        return Err(DatasynthError::OneClassEmpty("sequential"));
    }

    // Keep the under-represented class whole; shrink the other to the
    // rounded ratio target. Rounding is the ±1-sample tolerance.
    let odds = parallel_frac / (1.0 - parallel_frac);
    let parallel_target = ((sequential_total as f64 * odds).round() as usize).max(1);
    let (keep_parallel, keep_sequential) = if parallel_target <= parallel_total {
        (parallel_target, sequential_total)
    } else {
        let sequential_target = ((parallel_total as f64 / odds).round() as usize).max(1);
        (parallel_total, sequential_target.min(sequential_total))
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let chosen_parallel = choose(parallel_total, keep_parallel, &mut rng);
    let chosen_sequential = choose(sequential_total, keep_sequential, &mut rng);

    let mut seen_parallel = 0;
    let mut seen_sequential = 0;
    Ok(trajectories
        .into_iter()
        .filter(|t| {
            let (seen, chosen) = if t.uses_parallel {
                (&mut seen_parallel, &chosen_parallel)
            } else {
                (&mut seen_sequential, &chosen_sequential)
            };
            let keep = chosen.binary_search(seen).is_ok();
            *seen += 1;
            keep
        })
        .collect())
}

/// `amount` distinct indices out of `len`, ascending.
fn choose(len: usize, amount: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut indices = rand::seq::index::sample(rng, len, amount).into_vec();
    indices.sort_unstable();
    indices
}

/// A half-open character span, `start` inclusive, `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
}

/// One SFT training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    /// Prompt template (with the question substituted) followed by the
    /// serialized rollout.
    pub text: String,
    /// Character spans of `text` to exclude from the loss: exactly the
    /// observation blocks, tags included. Disjoint, ascending.
    pub loss_mask: Vec<MaskSpan>,
}

/// Exports trajectories as SFT records.
///
/// `template` may contain `{question}`, replaced per trajectory. Every
/// record is verified before it is returned: the mask spans, concatenated,
/// must re-parse to exactly the source rollout's observation events.
pub fn export_sft(
    trajectories: &[Trajectory],
    template: &str,
) -> Result<Vec<SftRecord>, DatasynthError> {
    trajectories
        .iter()
        .map(|t| {
            let record = render_sft(t, template);
            verify_mask(&record, &t.rollout)?;
            Ok(record)
        })
        .collect()
}

fn render_sft(t: &Trajectory, template: &str) -> SftRecord {
    let mut text = template.replace("{question}", &t.rollout.question);
    text.push_str("\n\n");
    let mut pos = text.chars().count();
    let mut loss_mask = Vec::new();
    for (i, event) in t.rollout.events.iter().enumerate() {
        if i > 0 {
            text.push('\n');
            pos += 1;
        }
        let rendered = event.render();
        let len = rendered.chars().count();
        if event.kind == EventKind::Observation {
            loss_mask.push(MaskSpan {
                start: pos,
                end: pos + len,
            });
        }
        text.push_str(&rendered);
        pos += len;
    }
    SftRecord { text, loss_mask }
}

/// The exported invariant, checked record by record: masked characters,
/// concatenated, parse back to the observation events and nothing else.
fn verify_mask(record: &SftRecord, rollout: &Rollout) -> Result<(), DatasynthError> {
    let chars: Vec<char> = record.text.chars().collect();
    let mut last_end = 0;
    let mut masked = String::new();
    for span in &record.loss_mask {
        if span.start < last_end || span.end > chars.len() || span.start >= span.end {
            return Err(DatasynthError::SerializationMismatch(format!(
                "bad span {}..{}",
                span.start, span.end
            )));
        }
        last_end = span.end;
        masked.extend(&chars[span.start..span.end]);
    }
    let parsed = parse_stream(&masked, &ParserConfig::default())
        .map_err(|e| DatasynthError::SerializationMismatch(e.to_string()))?;
    if parsed.incomplete.is_some() {
        return Err(DatasynthError::SerializationMismatch(
            "masked text ends mid-tag".to_string(),
        ));
    }
    let observations: Vec<&str> = rollout
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Observation)
        .map(|e| e.body.as_str())
        .collect();
    let masked_bodies: Vec<&str> = parsed.events.iter().map(|e| e.body.as_str()).collect();
    let all_observations = parsed
        .events
        .iter()
        .all(|e| e.kind == EventKind::Observation);
    if !all_observations || masked_bodies != observations {
        return Err(DatasynthError::SerializationMismatch(format!(
            "masked spans yielded {} events, source has {} observations",
            parsed.events.len(),
            observations.len()
        )));
    }
    Ok(())
}

/// Everything the curation pipeline needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub min_searches: usize,
    pub max_tokens: u64,
    pub parallel_frac: f64,
    pub seed: u64,
    pub tokenizer: TokenizerKind,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            min_searches: 3,
            max_tokens: 2000,
            parallel_frac: 0.6,
            seed: 0,
            tokenizer: TokenizerKind::Whitespace,
        }
    }
}

/// Where every input trajectory went. `input_count` always equals
/// `output_count` plus the three drop counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub input_count: usize,
    pub dropped_complexity: usize,
    pub dropped_length: usize,
    pub dropped_ratio: usize,
    pub output_count: usize,
    pub output_parallel: usize,
    pub output_sequential: usize,
    pub config: CurationConfig,
}

/// Runs the full pipeline: complexity filter, length filter, then ratio
/// balancing (last, so the manifest's final counts are what ships).
pub fn curate(
    trajectories: Vec<Trajectory>,
    config: &CurationConfig,
) -> Result<(Vec<Trajectory>, Manifest), DatasynthError> {
    let input_count = trajectories.len();
    let complex: Vec<Trajectory> = trajectories
        .into_iter()
        .filter(|t| filter_complexity(t, config.min_searches))
        .collect();
    let dropped_complexity = input_count - complex.len();
    let sized: Vec<Trajectory> = complex
        .into_iter()
        .filter(|t| filter_length(t, config.max_tokens))
        .collect();
    let dropped_length = input_count - dropped_complexity - sized.len();
    let before_ratio = sized.len();
    let balanced = balance_ratio(sized, config.parallel_frac, config.seed)?;
    let dropped_ratio = before_ratio - balanced.len();
    let output_parallel = balanced.iter().filter(|t| t.uses_parallel).count();
    let manifest = Manifest {
        schema: crate::trace::SCHEMA_VERSION,
        input_count,
        dropped_complexity,
        dropped_length,
        dropped_ratio,
        output_count: balanced.len(),
        output_parallel,
        output_sequential: balanced.len() - output_parallel,
        config: config.clone(),
    };
    Ok((balanced, manifest))
}

/// Records fresh trajectories by running questions through a policy — the
/// generation side of the pipeline. Output feeds [`curate`] after review.
pub fn synthesize<F>(
    problems: &[EvalProblem],
    make_policy: F,
    tools: &ToolRegistry,
    config: &RunConfig,
    jobs: usize,
) -> Result<Vec<RolloutRecord>, DatasynthError>
where
    F: Fn(&EvalProblem) -> Box<dyn Policy> + Sync,
{
    Ok(crate::evalkit::evaluate(problems, make_policy, tools, config, jobs)?.rollouts)
}

/// Writes SFT records as JSONL.
pub fn write_sft_jsonl<W: Write>(mut w: W, records: &[SftRecord]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
