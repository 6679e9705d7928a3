//! Command-line front end: run single questions, evaluate datasets, curate
//! trajectory pools, and manage corpora.
//!
//! Exit codes: 0 answered/ok, 2 usage or configuration error, 3 turn budget
//! exhausted, 4 policy failure, 5 tool failure, 6 unparsable plan.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use commands::{CorpusArgs, EvalArgs, FilterArgs, RunArgs, RunOverrides, EXIT_USAGE};
use config::AppConfig;
use graphrun::tokenize::TokenizerKind;
use graphrun::{Mode, Schedule};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "graphrun", version, about = "Plan-as-a-graph question runner")]
struct Cli {
    /// TOML config file (endpoint, corpus, run defaults, output dir).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Interactive,
    Static,
}

impl From<ModeArg> for Mode {
    fn from(arg: ModeArg) -> Mode {
        match arg {
            ModeArg::Interactive => Mode::Interactive,
            ModeArg::Static => Mode::Static,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Leveled,
    PerNode,
}

impl From<ScheduleArg> for Schedule {
    fn from(arg: ScheduleArg) -> Schedule {
        match arg {
            ScheduleArg::Leveled => Schedule::Leveled,
            ScheduleArg::PerNode => Schedule::PerNode,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Whitespace,
    Chars,
}

impl From<TokenizerArg> for TokenizerKind {
    fn from(arg: TokenizerArg) -> TokenizerKind {
        match arg {
            TokenizerArg::Whitespace => TokenizerKind::Whitespace,
            TokenizerArg::Chars => TokenizerKind::Chars,
        }
    }
}

#[derive(clap::Args)]
struct CommonRunFlags {
    /// Re-prompt per level (interactive) or resolve templates (static).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Batch whole levels, or one node per turn as a sequential baseline.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    max_turns: Option<u32>,
    /// Most tool calls in flight at once.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Per tool call, in milliseconds.
    #[arg(long)]
    tool_timeout_ms: Option<u64>,
    /// Replay generation chunks from a JSONL file instead of an endpoint.
    #[arg(long)]
    scripted: Option<PathBuf>,
    /// Document corpus (JSONL with doc_id, title, text).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory (default `out`, or the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonRunFlags {
    fn overrides(&self) -> RunOverrides {
        RunOverrides {
            mode: self.mode.map(Into::into),
            schedule: self.schedule.map(Into::into),
            max_turns: self.max_turns,
            parallelism: self.parallelism,
            tool_timeout_ms: self.tool_timeout_ms,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question and persist its rollout.
    Run {
        question: String,
        #[command(flatten)]
        flags: CommonRunFlags,
    },
    /// Evaluate a JSONL dataset of {question, golds} problems.
    Eval {
        dataset: PathBuf,
        /// Problems evaluated concurrently.
        #[arg(long, default_value_t = 4)]
        jobs: usize,
        #[command(flatten)]
        flags: CommonRunFlags,
    },
    /// Curate a trajectory pool and export SFT records.
    Filter {
        /// Rollout JSONL with gold answers.
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_searches: usize,
        #[arg(long, default_value_t = 2000)]
        max_tokens: u64,
        /// Target fraction of parallel-search samples.
        #[arg(long, default_value_t = 0.6)]
        parallel_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = TokenizerArg::Whitespace)]
        tokenizer: TokenizerArg,
        /// Prompt template file; `{question}` is substituted.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build, inspect, or query document corpora.
    Corpus {
        #[command(subcommand)]
        action: CorpusCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Pack a directory of .txt files into a corpus (stem becomes id/title).
    Build {
        from_dir: PathBuf,
        #[arg(long, default_value = "corpus.jsonl")]
        out: PathBuf,
    },
    /// Document and token counts.
    Stats { corpus: PathBuf },
    /// Query a corpus directly.
    Search {
        corpus: PathBuf,
        query: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let app = match AppConfig::load(cli.config.as_deref()) {
        Ok(app) => app,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let outcome = match cli.command {
        Command::Run { question, flags } => commands::cmd_run(
            &app,
            &RunArgs {
                question,
                scripted: flags.scripted.clone(),
                corpus: flags.corpus.clone(),
                out: flags.out.clone(),
                overrides: flags.overrides(),
            },
        ),
        Command::Eval {
            dataset,
            jobs,
            flags,
        } => commands::cmd_eval(
            &app,
            &EvalArgs {
                dataset,
                scripted: flags.scripted.clone(),
                corpus: flags.corpus.clone(),
                out: flags.out.clone(),
                jobs,
                overrides: flags.overrides(),
            },
        ),
        Command::Filter {
            input,
            min_searches,
            max_tokens,
            parallel_frac,
            seed,
            tokenizer,
            template,
            out,
        } => commands::cmd_filter(
            &app,
            &FilterArgs {
                input,
                out,
                min_searches,
                max_tokens,
                parallel_frac,
                seed,
                tokenizer: tokenizer.into(),
                template,
            },
        ),
        Command::Corpus { action } => commands::cmd_corpus(&match action {
            CorpusCommand::Build { from_dir, out } => CorpusArgs::Build { from_dir, out },
            CorpusCommand::Stats { corpus } => CorpusArgs::Stats { corpus },
            CorpusCommand::Search {
                corpus,
                query,
                top_k,
            } => CorpusArgs::Search {
                corpus,
                query,
                top_k,
            },
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
