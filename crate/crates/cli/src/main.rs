use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guided_core::config::{CliConfig, ConfigError, ProviderStack, Source, CONFIG_ENV};
use guided_core::harness::{
    emit_report, load_dataset, split, Baseline, Dataset, DatasetFormat, EvalReport, ExperimentConfig, Grader,
    Harness, HarnessError, QaFields, SweepAxis,
};
use guided_core::learning::{learn_guidelines, LearnConfig, LearningError};
use guided_core::{read_guideline, write_guideline, Pipeline, TaskKind};

#[derive(Parser)]
#[command(name = "guided", version, about = "Learn step-wise guidelines and run guided evaluations")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Record every completion into this tape file.
    #[arg(long, global = true, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Serve completions from this tape file instead of the configured models.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Bypass the response cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a guideline on the train split of a dataset.
    Learn(LearnArgs),
    /// Evaluate one configuration on the test split.
    Eval(EvalArgs),
    /// Evaluate a configuration over several step counts or refinement rounds.
    Sweep(SweepArgs),
    /// Apply a guideline learned on one task to another task's dataset.
    Transfer(EvalArgs),
    /// Rebuild summary.md from the reports under a runs directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Task id (selects the answer kind for known tasks).
    #[arg(long)]
    task: String,
    /// bbh_json or jsonl_qa; inferred from the file extension when omitted.
    #[arg(long)]
    format: Option<String>,
    /// Answer kind when the task is not a known one.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long, default_value = "id")]
    id_field: String,
    #[arg(long, default_value = "question")]
    question_field: String,
    #[arg(long, default_value = "answer")]
    answer_field: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: String,
    #[arg(long)]
    out: PathBuf,
    /// Require exactly this many guideline steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Executor and refiner model unless overridden.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    executor: Option<String>,
    #[arg(long)]
    refiner: Option<String>,
    #[arg(long)]
    rounds: Option<u32>,
    /// Plan at inference time instead of learning a guideline.
    #[arg(long)]
    no_learn: bool,
    /// Render the whole guideline into a single prompt.
    #[arg(long)]
    no_step: bool,
    #[arg(long)]
    no_refine: bool,
    /// Use this guideline file instead of learning one.
    #[arg(long)]
    guideline: Option<PathBuf>,
    /// cot or few_shot_cot.
    #[arg(long)]
    baseline: Option<String>,
    /// Require exactly this many guideline steps when learning.
    #[arg(long)]
    steps: Option<usize>,
    /// Abort on the first errored sample.
    #[arg(long)]
    strict: bool,
    /// Write one trajectory document per sample under <runs-dir>/trajectories.
    #[arg(long)]
    dump_trajectories: bool,
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// step_count or refine_rounds.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<u32>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs_dir: Option<PathBuf>,
}

/// An error and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl ToString) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn pipeline(message: impl ToString) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Dataset(_) | HarnessError::Guideline(_) => usage(e),
            _ => pipeline(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<CliConfig, Failure> {
    match path {
        Some(p) => Ok(CliConfig::load(p)?),
        None => Ok(CliConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref())?;
    if let Command::Report(args) = &cli.command {
        return report(&cfg, args);
    }

    let models = command_models(&cli.command)?;
    if cli.replay.is_none() {
        cfg.require_models(models.iter().map(String::as_str))?;
    }
    let source = match &cli.replay {
        Some(p) => Source::Replay(p.clone()),
        None => Source::Live,
    };
    let stack = ProviderStack::build(&cfg, source, !cli.no_cache, cli.record.is_some())?;
    let templates = cfg.templates()?;
    let grader = Grader::default();
    let p = Pipeline::new(stack.provider(), &templates, &grader).with_sampling(cfg.sampling());

    let result = match &cli.command {
        Command::Learn(a) => learn(&cfg, &p, a),
        Command::Eval(a) => eval(&cfg, &p, a, false),
        Command::Transfer(a) => eval(&cfg, &p, a, true),
        Command::Sweep(a) => sweep(&cfg, &p, a),
        Command::Report(_) => unreachable!(),
    };
    eprintln!(
        "provider: {} {} calls, {} cache inserts",
        stack.live_calls(),
        if cli.replay.is_some() { "replayed" } else { "live" },
        stack.cache_inserts()
    );
    if let Some(tape) = &cli.record {
        stack.save_tape(tape).map_err(pipeline)?;
        eprintln!("tape written to {}", tape.display());
    }
    result
}

fn command_models(cmd: &Command) -> Result<Vec<String>, Failure> {
    Ok(match cmd {
        Command::Learn(a) => vec![a.model.clone()],
        Command::Eval(a) | Command::Transfer(a) => {
            let (e, r) = models_of(a)?;
            vec![e, r]
        }
        Command::Sweep(a) => {
            let (e, r) = models_of(&a.eval)?;
            vec![e, r]
        }
        Command::Report(_) => vec![],
    })
}

fn models_of(a: &EvalArgs) -> Result<(String, String), Failure> {
    let executor = a
        .executor
        .clone()
        .or_else(|| a.model.clone())
        .ok_or_else(|| usage("one of --model or --executor is required"))?;
    let refiner = a.refiner.clone().or_else(|| a.model.clone()).unwrap_or_else(|| executor.clone());
    Ok((executor, refiner))
}

fn load(cfg: &CliConfig, a: &DataArgs) -> Result<Dataset, Failure> {
    let format = match &a.format {
        Some(f) => f.parse::<DatasetFormat>().map_err(usage)?,
        None if a.data.extension().is_some_and(|e| e == "jsonl") => DatasetFormat::JsonlQa,
        None => DatasetFormat::BbhJson,
    };
    let kind = a.kind.as_deref().map(str::parse::<TaskKind>).transpose().map_err(usage)?;
    let fields = QaFields {
        id: a.id_field.clone(),
        question: a.question_field.clone(),
        answer: a.answer_field.clone(),
        kind,
    };
    let _ = cfg;
    load_dataset(&a.data, format, &a.task, &fields).map_err(|e| usage(format!("{}: {e}", a.data.display())))
}

fn learn(cfg: &CliConfig, p: &Pipeline, a: &LearnArgs) -> Result<(), Failure> {
    let d = load(cfg, &a.data)?;
    let seed = a.data.seed.unwrap_or(cfg.split_seed);
    let fraction = a.data.train_fraction.unwrap_or(cfg.train_fraction);
    let (train, _) = split(&d, fraction, seed).map_err(usage)?;
    let mut resume = a.out.clone().into_os_string();
    resume.push(".buffer.json");
    let lc = LearnConfig {
        model: a.model.clone(),
        max_steps: cfg.max_steps.max(a.steps.unwrap_or(0)),
        target_steps: a.steps,
        chunk_chars: 60_000,
        concurrency: a.concurrency.unwrap_or(cfg.concurrency),
        resume_path: Some(PathBuf::from(resume)),
        dataset_digest: train.source_digest.clone(),
    };
    let learned = learn_guidelines(p, &train.task_id, &train.samples, &lc).map_err(|e| match e {
        LearningError::Precondition(_) => usage(e),
        e => pipeline(e),
    })?;
    write_guideline(&learned.guideline, &a.out).map_err(pipeline)?;
    println!(
        "guideline with {} steps learned from {} samples ({} patterns, {} reflections) written to {}",
        learned.guideline.len(),
        train.len(),
        learned.buffer.count(guided_core::types::ExtractionKind::Pattern),
        learned.buffer.count(guided_core::types::ExtractionKind::Reflection),
        a.out.display()
    );
    Ok(())
}

fn experiment(cfg: &CliConfig, a: &EvalArgs, transfer: bool) -> Result<ExperimentConfig, Failure> {
    let (executor, refiner) = models_of(a)?;
    if a.baseline.is_some() && (a.guideline.is_some() || a.no_learn || a.no_step || a.no_refine || a.rounds.is_some()) {
        return Err(usage("--baseline cannot be combined with guided flags"));
    }
    if a.no_learn && a.guideline.is_some() {
        return Err(usage("--no-learn cannot be combined with --guideline"));
    }
    if transfer && a.guideline.is_none() {
        return Err(usage("transfer requires --guideline"));
    }
    if let Some(path) = &a.guideline {
        read_guideline(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    let mut e = ExperimentConfig::guided(executor);
    e.refiner_model = refiner;
    e.learn = !a.no_learn;
    e.stepwise = !a.no_step;
    e.refine_rounds = a.rounds.unwrap_or(cfg.refine_rounds);
    e.refine = !a.no_refine;
    e.split_seed = a.data.seed.unwrap_or(cfg.split_seed);
    e.train_fraction = a.data.train_fraction.unwrap_or(cfg.train_fraction);
    e.guideline_path = a.guideline.clone();
    e.baseline = a.baseline.as_deref().map(str::parse::<Baseline>).transpose().map_err(usage)?;
    e.target_steps = a.steps;
    e.max_steps = cfg.max_steps.max(a.steps.unwrap_or(0));
    let e = e.normalized();
    e.validate(cfg.refine_cap)?;
    Ok(e)
}

fn harness<'a>(cfg: &CliConfig, p: &Pipeline<'a>, a: &EvalArgs) -> Harness<'a> {
    let mut h = Harness::new(*p);
    h.concurrency = a.concurrency.unwrap_or(cfg.concurrency);
    h.strict = a.strict || cfg.strict;
    h.refine_cap = cfg.refine_cap;
    h.guideline_dir = cfg.guideline_dir.clone();
    if a.dump_trajectories {
        h.dump_dir = Some(runs_dir(cfg, a).join("trajectories"));
    }
    h
}

fn runs_dir(cfg: &CliConfig, a: &EvalArgs) -> PathBuf {
    a.runs_dir.clone().unwrap_or_else(|| cfg.runs_dir.clone())
}

/// Writes the new reports and rebuilds summary.md over every report in the directory.
fn publish(dir: &Path, new: &[EvalReport]) -> Result<(), Failure> {
    let mut all = existing_reports(dir)?;
    all.retain(|r| !new.iter().any(|n| n.run_id == r.run_id));
    all.extend(new.iter().cloned());
    all.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    emit_report(&all, dir).map_err(pipeline)?;
    for r in new {
        let errored = if r.errored.is_empty() {
            String::new()
        } else {
            format!(", {} errored", r.errored.len())
        };
        println!(
            "{} on {}: accuracy {:.4} ({}/{}{errored}), {} provider calls -> {}",
            r.method,
            r.task_label(),
            r.accuracy,
            r.correct,
            r.per_sample.len(),
            r.total_provider_calls(),
            dir.join(&r.run_id).join("report.json").display()
        );
    }
    Ok(())
}

fn existing_reports(dir: &Path) -> Result<Vec<EvalReport>, Failure> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(out);
    };
    for entry in entries.flatten() {
        let path = entry.path().join("report.json");
        if path.is_file() {
            out.push(EvalReport::load(&path).map_err(pipeline)?);
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

fn eval(cfg: &CliConfig, p: &Pipeline, a: &EvalArgs, transfer: bool) -> Result<(), Failure> {
    let e = experiment(cfg, a, transfer)?;
    let d = load(cfg, &a.data)?;
    let report = harness(cfg, p, a).run_experiment(&e, &d)?;
    publish(&runs_dir(cfg, a), &[report])
}

fn sweep(cfg: &CliConfig, p: &Pipeline, a: &SweepArgs) -> Result<(), Failure> {
    let axis: SweepAxis = a.axis.parse().map_err(usage)?;
    if a.values.is_empty() {
        return Err(usage("--values must list at least one value"));
    }
    let e = experiment(cfg, &a.eval, false)?;
    let d = load(cfg, &a.eval.data)?;
    let reports = harness(cfg, p, &a.eval).sweep(axis, &a.values, &e, &d)?;
    publish(&runs_dir(cfg, &a.eval), &reports)
}

fn report(cfg: &CliConfig, a: &ReportArgs) -> Result<(), Failure> {
    let dir = a.runs_dir.clone().unwrap_or_else(|| cfg.runs_dir.clone());
    let reports = existing_reports(&dir)?;
    if reports.is_empty() {
        return Err(usage(format!("no reports found under {}", dir.display())));
    }
    let (_, summary) = emit_report(&reports, &dir).map_err(pipeline)?;
    println!("{} reports summarized in {}", reports.len(), summary.display());
    Ok(())
}
