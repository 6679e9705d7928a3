//! Emits a synthetic trajectory pool as JSONL on stdout, for exercising the
//! curation pipeline without a live endpoint:
//!
//! ```text
//! cargo run -p graphrun --example synth_pool > pool.jsonl
//! graphrun filter pool.jsonl --out curated/
//! ```
//!
//! The pool is seeded and therefore reproducible. It mixes search depths,
//! batch widths, and response lengths so every curation stage has work to do.

use graphrun::trace::{EventKind, RolloutRecord, TraceEvent};
use graphrun::Rollout;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const TOPICS: &[(&str, &str)] = &[
    (
        "the Danube",
        "Which river flows through both Vienna and Budapest?",
    ),
    ("Lisbon", "What is the capital of Portugal?"),
    (
        "yes",
        "Is the capital of Poland north of the capital of Hungary?",
    ),
    ("the Vistula", "Which river runs through Warsaw?"),
    ("Oslo", "Which capital sits at the head of the Oslofjord?"),
    (
        "Madrid",
        "Which capital lies on a plateau west of the Manzanares?",
    ),
];

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut records = Vec::new();
    for i in 0..24 {
        let (gold, question) = TOPICS[i % TOPICS.len()];
        let mut rollout = Rollout::new(question);
        rollout.events.push(TraceEvent::new(
            EventKind::Think,
            "Break the question into lookups before searching.",
        ));

        let hops = rng.gen_range(1..=5);
        for hop in 0..hops {
            // Roughly half the trajectories batch two queries somewhere.
            let body = if rng.gen_bool(0.5) {
                format!("{question} part {hop} | {question} cross-check {hop}")
            } else {
                format!("{question} part {hop}")
            };
            rollout
                .events
                .push(TraceEvent::new(EventKind::Search, body));
            rollout.events.push(TraceEvent::new(
                EventKind::Observation,
                format!("Doc 1 - note:\nRetrieved passage {hop} relevant to the question."),
            ));
        }

        if rng.gen_bool(0.2) {
            // A few runaway transcripts for the length cap to catch.
            let padding = vec!["deliberation"; 3000].join(" ");
            rollout
                .events
                .push(TraceEvent::new(EventKind::Think, padding));
        }

        rollout
            .events
            .push(TraceEvent::new(EventKind::Answer, gold));
        rollout.n_in = 200 + 31 * i as u64;
        rollout.n_out = 40 + 7 * i as u64;

        let mut record = RolloutRecord::from_rollout(&rollout, Some(true));
        record.golds = Some(vec![gold.to_string()]);
        records.push(record);
    }

    let stdout = std::io::stdout();
    graphrun::trace::write_jsonl(stdout.lock(), &records).expect("write pool");
}
