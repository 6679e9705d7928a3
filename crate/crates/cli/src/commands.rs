//! The four subcommand bodies. Each returns the process exit code.

use crate::config::AppConfig;
use anyhow::{anyhow, bail, Context, Result};
use graphrun::datasynth::{
    balance_ratio, export_sft, filter_complexity, filter_length, write_sft_jsonl, DatasynthError,
    Manifest, Trajectory,
};
use graphrun::evalkit::{evaluate, EvalProblem};
use graphrun::policy::DEFAULT_SYSTEM_PROMPT;
use graphrun::tokenize::TokenizerKind;
use graphrun::toolbox::CalcTool;
use graphrun::trace::{write_jsonl_file, RolloutRecord, SCHEMA_VERSION};
use graphrun::{
    run, Corpus, HttpPolicy, Policy, RunConfig, ScriptedPolicy, SearchTool, Termination,
    ToolRegistry,
};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;
pub const EXIT_POLICY: u8 = 4;
pub const EXIT_TOOL: u8 = 5;
pub const EXIT_PLAN: u8 = 6;

fn termination_code(termination: Termination) -> u8 {
    match termination {
        Termination::Answered => EXIT_OK,
        Termination::BudgetExhausted => EXIT_BUDGET,
        Termination::PolicyError => EXIT_POLICY,
        Termination::ToolFatal => EXIT_TOOL,
        Termination::PlanParseFailure => EXIT_PLAN,
    }
}

fn load_corpus(config: &AppConfig, flag: Option<&Path>) -> Result<Corpus> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| config.corpus.clone())
        .ok_or_else(|| {
            anyhow!("no corpus: pass --corpus <file.jsonl> or set `corpus` in the config")
        })?;
    Corpus::from_jsonl_file(&path).with_context(|| format!("cannot load corpus {}", path.display()))
}

fn registry_for(corpus: &Corpus) -> Result<ToolRegistry> {
    ToolRegistry::new()
        .with(Box::new(SearchTool::new(corpus, 3)))
        .map_err(|e| anyhow!(e))?
        .with(Box::new(CalcTool::new()))
        .map_err(|e| anyhow!(e))
}

fn make_http_policy(config: &AppConfig) -> Result<HttpPolicy> {
    let endpoint = config.endpoint.clone().ok_or_else(|| {
        anyhow!("no policy: pass --scripted <file> or configure an [endpoint] section")
    })?;
    HttpPolicy::new(endpoint).map_err(|e| anyhow!("endpoint rejected: {e}"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub struct RunArgs {
    pub question: String,
    pub scripted: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: RunOverrides,
}

/// Flag-level overrides applied on top of the config file's `[run]` table.
#[derive(Default)]
pub struct RunOverrides {
    pub mode: Option<graphrun::Mode>,
    pub schedule: Option<graphrun::Schedule>,
    pub max_turns: Option<u32>,
    pub parallelism: Option<usize>,
    pub tool_timeout_ms: Option<u64>,
}

impl RunOverrides {
    fn apply(&self, mut config: RunConfig) -> RunConfig {
        if let Some(mode) = self.mode {
            config.mode = mode;
        }
        if let Some(schedule) = self.schedule {
            config.schedule = schedule;
        }
        if let Some(max_turns) = self.max_turns {
            config.max_turns = max_turns;
        }
        if let Some(parallelism) = self.parallelism {
            config.parallelism = parallelism;
        }
        if let Some(timeout) = self.tool_timeout_ms {
            config.tool_timeout_ms = Some(timeout);
        }
        config
    }
}

pub fn cmd_run(app: &AppConfig, args: &RunArgs) -> Result<u8> {
    let run_config = args.overrides.apply(app.run_config());
    run_config
        .validate()
        .map_err(|e| anyhow!("invalid run configuration: {e}"))?;

    let corpus = load_corpus(app, args.corpus.as_deref())?;
    let tools = registry_for(&corpus)?;
    let mut policy: Box<dyn Policy> = match &args.scripted {
        Some(path) => Box::new(
            ScriptedPolicy::from_jsonl_file(path)
                .with_context(|| format!("cannot load script {}", path.display()))?,
        ),
        None => Box::new(make_http_policy(app)?),
    };

    let result = run(&args.question, policy.as_mut(), &tools, &run_config)
        .map_err(|e| anyhow!("invalid run configuration: {e}"))?;

    match &result.final_answer {
        Some(answers) => println!("answer: {}", answers.join(" | ")),
        None => println!(
            "no answer ({}){}",
            result.termination,
            result
                .failure
                .as_deref()
                .map(|d| format!(": {d}"))
                .unwrap_or_default()
        ),
    }
    println!(
        "turns: {}  tokens: {} in / {} out  wall: {:.3}s{}",
        result.turns_used,
        result.rollout.n_in,
        result.rollout.n_out,
        result.wall_time.as_secs_f64(),
        if result.divergence {
            "  (divergence)"
        } else {
            ""
        }
    );

    let out_dir = app.output_dir(args.out.as_deref());
    ensure_dir(&out_dir)?;
    let rollout_path = out_dir.join("rollout.jsonl");
    let record = RolloutRecord::from_rollout(&result.rollout, None);
    write_jsonl_file(&rollout_path, &[record])
        .with_context(|| format!("cannot write {}", rollout_path.display()))?;
    println!("rollout: {}", rollout_path.display());

    Ok(termination_code(result.termination))
}

pub struct EvalArgs {
    pub dataset: PathBuf,
    pub scripted: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub overrides: RunOverrides,
}

/// Parses the dataset line by line: malformed lines are reported on stderr
/// and skipped, the rest still run.
fn read_problems_lenient(path: &Path) -> Result<Vec<EvalProblem>> {
    let file =
        File::open(path).with_context(|| format!("cannot open dataset {}", path.display()))?;
    let mut problems = Vec::new();
    let mut bad = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EvalProblem>(&line) {
            Ok(problem) => problems.push(problem),
            Err(e) => {
                bad += 1;
                eprintln!("warning: dataset line {} skipped: {e}", i + 1);
            }
        }
    }
    if problems.is_empty() {
        bail!(
            "dataset {} has no usable problems ({bad} malformed line(s))",
            path.display()
        );
    }
    Ok(problems)
}

pub fn cmd_eval(app: &AppConfig, args: &EvalArgs) -> Result<u8> {
    let run_config = args.overrides.apply(app.run_config());
    run_config
        .validate()
        .map_err(|e| anyhow!("invalid run configuration: {e}"))?;
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }

    let problems = read_problems_lenient(&args.dataset)?;
    let corpus = load_corpus(app, args.corpus.as_deref())?;
    let tools = registry_for(&corpus)?;

    // Per-problem policy: a `script` in the dataset wins, then a shared
    // --scripted file, then the configured endpoint.
    let shared_script: Option<Vec<String>> = match &args.scripted {
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("cannot load script {}", path.display()))?;
            let mut chunks = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                #[derive(serde::Deserialize)]
                struct Chunk {
                    text: String,
                }
                chunks.push(serde_json::from_str::<Chunk>(&line)?.text);
            }
            Some(chunks)
        }
        None => None,
    };
    let endpoint_needed = args.scripted.is_none() && problems.iter().any(|p| p.script.is_none());
    if endpoint_needed {
        // Fail fast before the sweep, not on problem #37.
        make_http_policy(app)?;
    }
    let app_for_policies = app.clone();
    let make_policy = move |problem: &EvalProblem| -> Box<dyn Policy> {
        if let Some(script) = &problem.script {
            Box::new(ScriptedPolicy::from_chunks(script.clone()))
        } else if let Some(chunks) = &shared_script {
            Box::new(ScriptedPolicy::from_chunks(chunks.clone()))
        } else {
            // Validated above; only env changes mid-run could break this.
            Box::new(make_http_policy(&app_for_policies).expect("endpoint validated before sweep"))
        }
    };

    let outcome = evaluate(&problems, make_policy, &tools, &run_config, args.jobs)
        .map_err(|e| anyhow!("evaluation failed: {e}"))?;

    let aggregates = &outcome.report.aggregates;
    println!(
        "problems: {}  mean_em: {:.3}  mean_turns: {:.2}  mean_wall: {:.3}s",
        aggregates.problems,
        aggregates.mean_em,
        aggregates.mean_turns,
        aggregates.mean_wall_time_secs,
    );
    if let Some(cop) = aggregates.cost_of_pass {
        println!("cost_of_pass: {cop:.1} tokens per solved problem");
    }

    let out_dir = app.output_dir(args.out.as_deref());
    ensure_dir(&out_dir)?;
    let write =
        |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
            let path = out_dir.join(name);
            let mut w = BufWriter::new(
                File::create(&path).with_context(|| format!("cannot write {}", path.display()))?,
            );
            f(&mut w)?;
            w.flush()?;
            Ok(())
        };
    write("report.json", &|w| outcome.report.write_json(w))?;
    write("records.jsonl", &|w| outcome.report.write_records_jsonl(w))?;
    write("turn_cdf.csv", &|w| outcome.report.write_turn_cdf_csv(w))?;
    write("length_hist.csv", &|w| {
        outcome.report.write_length_hist_csv(w)
    })?;
    write_jsonl_file(out_dir.join("rollouts.jsonl"), &outcome.rollouts)?;
    println!("reports: {}", out_dir.display());
    Ok(EXIT_OK)
}

pub struct FilterArgs {
    pub input: PathBuf,
    pub out: Option<PathBuf>,
    pub min_searches: usize,
    pub max_tokens: u64,
    pub parallel_frac: f64,
    pub seed: u64,
    pub tokenizer: TokenizerKind,
    pub template: Option<PathBuf>,
}

pub fn cmd_filter(app: &AppConfig, args: &FilterArgs) -> Result<u8> {
    let file = File::open(&args.input)
        .with_context(|| format!("cannot open trajectories {}", args.input.display()))?;
    let mut pairs: Vec<(RolloutRecord, Trajectory)> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RolloutRecord>(&line) {
            Ok(record) => {
                let trajectory = Trajectory::from_record(&record, args.tokenizer);
                pairs.push((record, trajectory));
            }
            Err(e) => eprintln!("warning: trajectory line {} skipped: {e}", i + 1),
        }
    }
    let input_count = pairs.len();
    if input_count == 0 {
        bail!("no usable trajectories in {}", args.input.display());
    }

    let complex: Vec<(RolloutRecord, Trajectory)> = pairs
        .into_iter()
        .filter(|(_, t)| filter_complexity(t, args.min_searches))
        .collect();
    let dropped_complexity = input_count - complex.len();
    let sized: Vec<(RolloutRecord, Trajectory)> = complex
        .into_iter()
        .filter(|(_, t)| filter_length(t, args.max_tokens))
        .collect();
    let dropped_length = input_count - dropped_complexity - sized.len();

    let trajectories: Vec<Trajectory> = sized.iter().map(|(_, t)| t.clone()).collect();
    let (kept, dropped_ratio) = match balance_ratio(trajectories, args.parallel_frac, args.seed) {
        Ok(balanced) => {
            let dropped = sized.len() - balanced.len();
            // Order-preserving subset: greedy match recovers which of
            // the (record, trajectory) pairs survived.
            let mut survivors = Vec::with_capacity(balanced.len());
            let mut next = balanced.iter().peekable();
            for pair in sized {
                if next.peek().is_some_and(|t| **t == pair.1) {
                    next.next();
                    survivors.push(pair);
                }
            }
            (survivors, dropped)
        }
        Err(DatasynthError::OneClassEmpty(class)) => {
            eprintln!(
                "warning: ratio stage skipped ({class} class is empty); \
                     output keeps the filtered set unbalanced"
            );
            (sized, 0)
        }
        Err(e) => return Err(anyhow!(e)),
    };

    let output_parallel = kept.iter().filter(|(_, t)| t.uses_parallel).count();
    let manifest = Manifest {
        schema: SCHEMA_VERSION,
        input_count,
        dropped_complexity,
        dropped_length,
        dropped_ratio,
        output_count: kept.len(),
        output_parallel,
        output_sequential: kept.len() - output_parallel,
        config: graphrun::datasynth::CurationConfig {
            min_searches: args.min_searches,
            max_tokens: args.max_tokens,
            parallel_frac: args.parallel_frac,
            seed: args.seed,
            tokenizer: args.tokenizer,
        },
    };

    let template = match &args.template {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("cannot read template {}", path.display()))?,
        None => format!("{DEFAULT_SYSTEM_PROMPT}\n\nQuestion: {{question}}"),
    };
    let kept_trajectories: Vec<Trajectory> = kept.iter().map(|(_, t)| t.clone()).collect();
    let sft = export_sft(&kept_trajectories, &template).map_err(|e| anyhow!(e))?;

    let out_dir = app.output_dir(args.out.as_deref());
    ensure_dir(&out_dir)?;
    let records: Vec<RolloutRecord> = kept.into_iter().map(|(r, _)| r).collect();
    write_jsonl_file(out_dir.join("curated.jsonl"), &records)?;
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    let sft_path = out_dir.join("sft.jsonl");
    write_sft_jsonl(BufWriter::new(File::create(&sft_path)?), &sft)?;

    println!(
        "kept {} of {} ({} too shallow, {} too long, {} for ratio)",
        manifest.output_count,
        manifest.input_count,
        manifest.dropped_complexity,
        manifest.dropped_length,
        manifest.dropped_ratio,
    );
    println!("outputs: {}", out_dir.display());
    Ok(EXIT_OK)
}

pub enum CorpusArgs {
    Build {
        from_dir: PathBuf,
        out: PathBuf,
    },
    Stats {
        corpus: PathBuf,
    },
    Search {
        corpus: PathBuf,
        query: String,
        top_k: usize,
    },
}

pub fn cmd_corpus(args: &CorpusArgs) -> Result<u8> {
    match args {
        CorpusArgs::Build { from_dir, out } => {
            let corpus = Corpus::from_text_dir(from_dir)
                .with_context(|| format!("cannot build corpus from {}", from_dir.display()))?;
            let file = File::create(out)
                .with_context(|| format!("cannot write corpus {}", out.display()))?;
            corpus.write_jsonl(BufWriter::new(file))?;
            println!("wrote {} documents to {}", corpus.len(), out.display());
        }
        CorpusArgs::Stats { corpus } => {
            let corpus = Corpus::from_jsonl_file(corpus)?;
            let tokenizer = TokenizerKind::Whitespace;
            let tokens: u64 = corpus
                .documents()
                .iter()
                .map(|d| tokenizer.count(&d.text))
                .sum();
            let documents = corpus.len().max(1) as u64;
            println!(
                "documents: {}  tokens: {tokens}  mean_tokens: {}",
                corpus.len(),
                tokens / documents,
            );
        }
        CorpusArgs::Search {
            corpus,
            query,
            top_k,
        } => {
            let corpus = Corpus::from_jsonl_file(corpus)?;
            let search = SearchTool::new(&corpus, *top_k);
            let hits = search.search(query, *top_k).map_err(|e| anyhow!(e))?;
            if hits.is_empty() {
                println!("no hits");
            }
            for (i, hit) in hits.iter().enumerate() {
                println!(
                    "{}. {} ({:.3}) — {}",
                    i + 1,
                    hit.title,
                    hit.score,
                    hit.snippet
                );
            }
        }
    }
    Ok(EXIT_OK)
}
