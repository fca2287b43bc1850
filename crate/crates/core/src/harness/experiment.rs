//! Experiment configurations and runs: guided, self-plan and baseline paths,
//! sweeps and transfer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::execution::{guided_solve, ExecutionConfig, ExecutionError, DEFAULT_REFINE_CAP, EXECUTION_TEMPLATES};
use crate::fsutil::{atomic_write, sha256_hex, to_pretty_json};
use crate::guideline::{read_guideline, validate_guideline, write_guideline, Guideline, GuidelineError, GuidelineStep, Provenance};
use crate::harness::dataset::{split, Dataset, DatasetError};
use crate::harness::grade::extract_answer;
use crate::harness::report::{ErroredSample, EvalReport, SampleResult, REPORT_SCHEMA_VERSION};
use crate::learning::parse::{parse_guideline_steps, split_steps};
use crate::learning::{learn_guidelines, LearnConfig, LearningError, DEFAULT_MAX_STEPS, LEARNING_TEMPLATES};
use crate::pipeline::{CallError, Pipeline};
use crate::provider::Counting;
use crate::template::TemplateName;
use crate::types::{Sample, StepRecord, Trajectory, TrajectoryDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Cot,
    FewShotCot,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::Cot => "CoT",
            Baseline::FewShotCot => "Few-shot CoT",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Cot => "cot",
            Baseline::FewShotCot => "few_shot_cot",
        })
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cot" => Ok(Baseline::Cot),
            "few_shot_cot" | "fewshot_cot" | "few_shot" => Ok(Baseline::FewShotCot),
            other => Err(format!("unknown baseline `{other}` (expected cot or few_shot_cot)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    StepCount,
    RefineRounds,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "step_count" | "steps" => Ok(SweepAxis::StepCount),
            "refine_rounds" | "rounds" => Ok(SweepAxis::RefineRounds),
            other => Err(format!("unknown sweep axis `{other}` (expected step_count or refine_rounds)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub learn: bool,
    pub stepwise: bool,
    pub refine: bool,
    pub refine_rounds: u32,
    pub executor_model: String,
    pub refiner_model: String,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Recorded in reports through the guideline's content digest.
    #[serde(skip)]
    pub guideline_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_steps: Option<usize>,
    pub max_steps: usize,
    pub few_shot_k: usize,
    pub max_step_chars: usize,
}

impl ExperimentConfig {
    /// Full configuration: learned guideline, stepwise execution, one refinement round.
    pub fn guided(model: impl Into<String>) -> Self {
        let model = model.into();
        ExperimentConfig {
            learn: true,
            stepwise: true,
            refine: true,
            refine_rounds: 1,
            executor_model: model.clone(),
            refiner_model: model,
            split_seed: 0,
            train_fraction: 0.25,
            guideline_path: None,
            baseline: None,
            target_steps: None,
            max_steps: DEFAULT_MAX_STEPS,
            few_shot_k: 3,
            max_step_chars: 8000,
        }
    }

    pub fn baseline(model: impl Into<String>, baseline: Baseline) -> Self {
        ExperimentConfig {
            baseline: Some(baseline),
            ..ExperimentConfig::guided(model)
        }
        .normalized()
    }

    /// Ablation configuration from its `(learn, step, refine)` flags.
    pub fn ablation(model: impl Into<String>, learn: bool, stepwise: bool, refine: bool) -> Self {
        ExperimentConfig {
            learn,
            stepwise,
            refine,
            ..ExperimentConfig::guided(model)
        }
        .normalized()
    }

    /// Canonical form: refinement off and zero rounds coincide, and a
    /// baseline clears every guided field.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if let Some(b) = c.baseline {
            c.learn = false;
            c.stepwise = false;
            c.refine = false;
            c.refine_rounds = 0;
            c.refiner_model = c.executor_model.clone();
            c.target_steps = None;
            if b != Baseline::FewShotCot {
                c.few_shot_k = 0;
            }
            return c;
        }
        c.few_shot_k = 0;
        c.refine = c.refine && c.refine_rounds > 0;
        if !c.refine {
            c.refine_rounds = 0;
        }
        c
    }

    pub fn validate(&self, refine_cap: u32) -> Result<(), HarnessError> {
        if self.baseline.is_some() && self.guideline_path.is_some() {
            return Err(HarnessError::Config("a baseline run cannot take a guideline".into()));
        }
        if !self.learn && self.guideline_path.is_some() {
            return Err(HarnessError::Config(
                "a supplied guideline contradicts learn=false (self-plan mode)".into(),
            ));
        }
        if self.baseline.is_none() && self.refine_rounds > refine_cap {
            return Err(HarnessError::Config(format!(
                "refine_rounds {} exceeds the cap of {refine_cap}",
                self.refine_rounds
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HarnessError::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.max_steps == 0 || self.target_steps == Some(0) {
            return Err(HarnessError::Config("step counts must be positive".into()));
        }
        if self.executor_model.is_empty() || self.refiner_model.is_empty() {
            return Err(HarnessError::Config("model names must be nonempty".into()));
        }
        Ok(())
    }

    pub fn flag_triple(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        format!(
            "learn={} step={} refine={}",
            mark(self.learn),
            mark(self.stepwise),
            mark(self.refine && self.refine_rounds > 0)
        )
    }

    /// Row label in summary tables.
    pub fn method_label(&self) -> String {
        let c = self.normalized();
        if let Some(b) = c.baseline {
            return match b {
                Baseline::Cot => format!("{} [{}]", b.label(), c.executor_model),
                Baseline::FewShotCot => format!("{} k={} [{}]", b.label(), c.few_shot_k, c.executor_model),
            };
        }
        let mut label = format!("Guided ({})", c.flag_triple());
        if c.refine && c.refine_rounds != 1 {
            label.push_str(&format!(" rounds={}", c.refine_rounds));
        }
        if let Some(t) = c.target_steps {
            label.push_str(&format!(" T={t}"));
        }
        if c.executor_model == c.refiner_model {
            label.push_str(&format!(" [{}]", c.executor_model));
        } else {
            label.push_str(&format!(" [{}/{}]", c.executor_model, c.refiner_model));
        }
        label
    }

    fn execution_config(&self) -> ExecutionConfig {
        ExecutionConfig {
            executor_model: self.executor_model.clone(),
            refiner_model: self.refiner_model.clone(),
            refine_rounds: if self.refine { self.refine_rounds } else { 0 },
            stepwise: self.stepwise,
            max_step_chars: self.max_step_chars,
        }
    }

    fn step_constraint(&self) -> String {
        match self.target_steps {
            Some(n) => format!("Use exactly {n} steps."),
            None => format!("Use between 1 and {} steps.", self.max_steps),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error("guideline: {0}")]
    Guideline(#[from] GuidelineError),
    #[error("sample `{sample_id}` failed: {message}")]
    Sample { sample_id: String, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error("report: {0}")]
    Report(String),
}

/// Content digest of a guideline: task id and step text, no provenance.
pub fn guideline_digest(g: &Guideline) -> String {
    sha256_hex(format!("{}\n{}", g.task_id, g.to_prompt_text()).as_bytes())
}

enum Strategy<'g> {
    Guided(&'g Guideline),
    SelfPlan,
    Baseline(Baseline, String),
}

/// Runs experiments against one pipeline.
pub struct Harness<'a> {
    pipeline: Pipeline<'a>,
    pub concurrency: usize,
    pub strict: bool,
    pub refine_cap: u32,
    pub chunk_chars: usize,
    /// Learned guidelines and resume buffers are kept here when set.
    pub guideline_dir: Option<PathBuf>,
    /// Per-sample trajectory documents go under `<dump_dir>/<run-id>/` when set.
    pub dump_dir: Option<PathBuf>,
    memo: Mutex<BTreeMap<String, Guideline>>,
}

impl<'a> Harness<'a> {
    pub fn new(pipeline: Pipeline<'a>) -> Self {
        Harness {
            pipeline,
            concurrency: 1,
            strict: false,
            refine_cap: DEFAULT_REFINE_CAP,
            chunk_chars: 60_000,
            guideline_dir: None,
            dump_dir: None,
            memo: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn pipeline(&self) -> &Pipeline<'a> {
        &self.pipeline
    }

    /// Learns a guideline on `train`, reusing an earlier result for the same
    /// inputs from memory or from `guideline_dir`.
    pub fn learn_guideline(&self, cfg: &ExperimentConfig, train: &Dataset) -> Result<Guideline, HarnessError> {
        let key = sha256_hex(
            serde_json::json!({
                "task": train.task_id,
                "train": train.source_digest,
                "model": cfg.executor_model,
                "templates": self.pipeline.templates.versions_of(&LEARNING_TEMPLATES),
                "max_steps": cfg.max_steps,
                "target_steps": cfg.target_steps,
                "temperature": self.pipeline.sampling.temperature,
                "max_tokens": self.pipeline.sampling.max_tokens,
            })
            .to_string()
            .as_bytes(),
        );
        if let Some(g) = self.memo.lock().unwrap().get(&key) {
            return Ok(g.clone());
        }
        let stem = format!("{}-{}", train.task_id, &key[..16]);
        let file = self.guideline_dir.as_ref().map(|d| d.join(format!("{stem}.guideline.json")));
        if let Some(f) = file.as_ref().filter(|f| f.exists()) {
            let g = read_guideline(f)?;
            self.memo.lock().unwrap().insert(key, g.clone());
            return Ok(g);
        }
        let lc = LearnConfig {
            model: cfg.executor_model.clone(),
            max_steps: cfg.max_steps,
            target_steps: cfg.target_steps,
            chunk_chars: self.chunk_chars,
            concurrency: self.concurrency,
            resume_path: self.guideline_dir.as_ref().map(|d| d.join(format!("{stem}.buffer.json"))),
            dataset_digest: train.source_digest.clone(),
        };
        let learned = learn_guidelines(&self.pipeline, &train.task_id, &train.samples, &lc)?;
        if let Some(f) = &file {
            write_guideline(&learned.guideline, f)?;
        }
        self.memo.lock().unwrap().insert(key, learned.guideline.clone());
        Ok(learned.guideline)
    }

    /// Evaluates the test split of `d` under `cfg`.
    pub fn run_experiment(&self, cfg: &ExperimentConfig, d: &Dataset) -> Result<EvalReport, HarnessError> {
        let cfg = cfg.normalized();
        cfg.validate(self.refine_cap)?;
        let (train, test) = split(d, cfg.train_fraction, cfg.split_seed)?;

        let guideline = match (&cfg.baseline, cfg.learn, &cfg.guideline_path) {
            (Some(_), _, _) | (None, false, _) => None,
            (None, true, Some(path)) => Some(read_guideline(path)?),
            (None, true, None) => Some(self.learn_guideline(&cfg, &train)?),
        };
        let strategy = match (&cfg.baseline, &guideline) {
            (Some(Baseline::FewShotCot), _) => Strategy::Baseline(Baseline::FewShotCot, self.exemplars(&cfg, &train)),
            (Some(b), _) => Strategy::Baseline(*b, String::new()),
            (None, Some(g)) => Strategy::Guided(g),
            (None, None) => Strategy::SelfPlan,
        };
        let templates: Vec<TemplateName> = match &strategy {
            Strategy::Baseline(Baseline::Cot, _) => vec![TemplateName::Cot],
            Strategy::Baseline(Baseline::FewShotCot, _) => vec![TemplateName::FewShotCot],
            Strategy::Guided(_) => EXECUTION_TEMPLATES.to_vec(),
            Strategy::SelfPlan => {
                let mut t = vec![TemplateName::SelfPlan];
                t.extend(EXECUTION_TEMPLATES);
                t
            }
        };
        let template_versions = self.pipeline.templates.versions_of(&templates);
        let g_digest = guideline.as_ref().map(guideline_digest);
        let source_task = guideline
            .as_ref()
            .map(|g| g.task_id.clone())
            .filter(|t| *t != d.task_id);
        let run_id = sha256_hex(
            serde_json::json!({
                "config": cfg,
                "dataset": d.source_digest,
                "task": d.task_id,
                "templates": template_versions,
                "guideline": g_digest,
            })
            .to_string()
            .as_bytes(),
        )[..16]
            .to_string();

        let eval = |x: &Sample| self.eval_sample(&cfg, &strategy, x);
        let outcomes: Vec<(Result<Trajectory, String>, usize)> = if self.concurrency > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.concurrency)
                .build()
                .map_err(|e| HarnessError::Io(e.to_string()))?;
            pool.install(|| test.samples.par_iter().map(eval).collect())
        } else {
            test.samples.iter().map(eval).collect()
        };

        let mut per_sample = Vec::new();
        let mut errored = Vec::new();
        for (x, (outcome, calls)) in test.samples.iter().zip(outcomes) {
            match outcome {
                Ok(t) => {
                    self.dump(&run_id, &t)?;
                    per_sample.push(SampleResult {
                        sample_id: x.id.clone(),
                        correct: self.pipeline.grader.grade(&t.final_answer, &x.gold_answer, x.kind),
                        predicted: t.final_answer,
                        gold: x.gold_answer.clone(),
                        provider_calls: calls,
                    });
                }
                Err(message) => {
                    if self.strict {
                        return Err(HarnessError::Sample {
                            sample_id: x.id.clone(),
                            message,
                        });
                    }
                    tracing::warn!(sample = %x.id, error = %message, "sample errored; excluded from accuracy");
                    errored.push(ErroredSample {
                        sample_id: x.id.clone(),
                        error: message,
                        provider_calls: calls,
                    });
                }
            }
        }
        let (correct, accuracy) = EvalReport::recount(&per_sample);
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id,
            task_id: d.task_id.clone(),
            source_task,
            method: cfg.method_label(),
            config: cfg,
            dataset_digest: d.source_digest.clone(),
            guideline_digest: g_digest,
            template_versions,
            per_sample,
            errored,
            correct,
            accuracy,
        })
    }

    /// One report per value along `axis`.
    pub fn sweep(
        &self,
        axis: SweepAxis,
        values: &[u32],
        cfg: &ExperimentConfig,
        d: &Dataset,
    ) -> Result<Vec<EvalReport>, HarnessError> {
        if values.is_empty() {
            return Err(HarnessError::Precondition("sweep values are empty".into()));
        }
        if cfg.baseline.is_some() {
            return Err(HarnessError::Precondition("baselines have no sweep axes".into()));
        }
        values
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                match axis {
                    SweepAxis::StepCount => {
                        if !c.learn || c.guideline_path.is_some() {
                            return Err(HarnessError::Precondition(
                                "a step-count sweep re-learns the guideline and needs learn=true without a guideline file"
                                    .into(),
                            ));
                        }
                        if v == 0 {
                            return Err(HarnessError::Precondition("step count must be at least 1".into()));
                        }
                        c.target_steps = Some(v as usize);
                        c.max_steps = c.max_steps.max(v as usize);
                    }
                    SweepAxis::RefineRounds => {
                        c.refine_rounds = v;
                        c.refine = v > 0;
                    }
                }
                self.run_experiment(&c, d)
            })
            .collect()
    }

    fn exemplars(&self, cfg: &ExperimentConfig, train: &Dataset) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
        train
            .samples
            .choose_multiple(&mut rng, cfg.few_shot_k)
            .map(|s| format!("Problem:\n{}\nAnswer: <answer>{}</answer>", s.input_text, s.gold_answer))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Evaluates one sample; returns the trajectory or an error message, and
    /// the number of provider calls made.
    fn eval_sample(&self, cfg: &ExperimentConfig, strategy: &Strategy, x: &Sample) -> (Result<Trajectory, String>, usize) {
        let counter = Counting::new(self.pipeline.provider);
        let p = self.pipeline.with_provider(&counter);
        let out = match strategy {
            Strategy::Guided(g) => guided_solve(&p, x, g, &cfg.execution_config()).map_err(|e| e.to_string()),
            Strategy::SelfPlan => self_plan(&p, x, cfg)
                .map_err(|e| e.to_string())
                .and_then(|g| guided_solve(&p, x, &g, &cfg.execution_config()).map_err(|e| e.to_string())),
            Strategy::Baseline(b, exemplars) => baseline_solve(&p, x, cfg, *b, exemplars).map_err(|e| e.to_string()),
        };
        (out, counter.count())
    }

    fn dump(&self, run_id: &str, t: &Trajectory) -> Result<(), HarnessError> {
        let Some(dir) = &self.dump_dir else {
            return Ok(());
        };
        let safe: String = t
            .sample_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        let path = dir.join(run_id).join(format!("{safe}.trajectory.json"));
        let bytes = to_pretty_json(&TrajectoryDocument::new(t.clone())).map_err(|e| HarnessError::Io(e.to_string()))?;
        atomic_write(&path, &bytes).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }
}

/// Asks the executor for a step plan and shapes it as a guideline with no
/// mistakes or preventions.
pub fn self_plan(p: &Pipeline, x: &Sample, cfg: &ExperimentConfig) -> Result<Guideline, ExecutionError> {
    if x.input_text.trim().is_empty() {
        return Err(ExecutionError::Precondition(format!("sample `{}` has empty input", x.id)));
    }
    let reply = p.call(
        &cfg.executor_model,
        TemplateName::SelfPlan,
        &[("input", &x.input_text), ("step_constraint", &cfg.step_constraint())],
    )?;
    let mut steps: Vec<GuidelineStep> = parse_guideline_steps(&reply)
        .into_iter()
        .take(cfg.max_steps)
        .enumerate()
        .map(|(i, s)| GuidelineStep::new(i + 1, s.title, s.execution))
        .collect();
    if steps.is_empty() || steps.iter().any(|s| s.execution.trim().is_empty()) {
        tracing::warn!(sample = %x.id, "self-plan reply had no usable steps; using a single step");
        let text = reply.trim();
        steps = vec![GuidelineStep::new(
            1,
            "Solve the problem",
            if text.is_empty() { "Solve the problem step by step." } else { text },
        )];
    }
    let g = Guideline {
        task_id: x.task_id.clone(),
        provenance: Provenance::now(
            &cfg.executor_model,
            "",
            p.templates.versions_of(&[TemplateName::SelfPlan]),
        ),
        steps,
    };
    debug_assert!(validate_guideline(&g).is_empty());
    Ok(g)
}

fn baseline_solve(
    p: &Pipeline,
    x: &Sample,
    cfg: &ExperimentConfig,
    b: Baseline,
    exemplars: &str,
) -> Result<Trajectory, CallError> {
    let reply = match b {
        Baseline::Cot => p.call(&cfg.executor_model, TemplateName::Cot, &[("input", &x.input_text)])?,
        Baseline::FewShotCot => p.call(
            &cfg.executor_model,
            TemplateName::FewShotCot,
            &[("input", &x.input_text), ("exemplars", exemplars)],
        )?,
    };
    Ok(Trajectory {
        sample_id: x.id.clone(),
        steps: split_steps(&reply)
            .into_iter()
            .enumerate()
            .map(|(i, s)| StepRecord::unrefined(i + 1, s))
            .collect(),
        final_answer: extract_answer(&reply),
        executor_model: cfg.executor_model.clone(),
        refiner_model: cfg.executor_model.clone(),
        warnings: Vec::new(),
    })
}
