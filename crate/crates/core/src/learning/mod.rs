//! Guideline learning: solve each training sample, extract reusable steps
//! from the successes, reflect on the failures, and aggregate everything into
//! one task guideline.

pub mod parse;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fsutil::{atomic_write, to_pretty_json};
use crate::guideline::{validate_guideline, Guideline, GuidelineStep, Provenance};
use crate::harness::grade::extract_answer;
use crate::pipeline::{CallError, Pipeline};
use crate::provider::Message;
use crate::template::TemplateName;
use crate::types::{
    ExtractionContent, ExtractionKind, ExtractionRecord, PatternStep, Reflection, Sample, StepRecord, Trajectory,
};

use parse::{parse_guideline_steps, parse_reflections, split_steps, ParsedStep};

/// Stages whose templates shape a learned guideline.
pub const LEARNING_TEMPLATES: [TemplateName; 4] = [
    TemplateName::InitialSolve,
    TemplateName::Extract,
    TemplateName::Reflect,
    TemplateName::Aggregate,
];

pub const DEFAULT_MAX_STEPS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum LearningError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("cannot aggregate: {0}")]
    CannotAggregate(String),
    #[error("aggregation failed ({reason}); raw reply:\n{raw}")]
    Aggregation { reason: String, raw: String },
    #[error("learning aborted after {processed}/{total} samples: {source}")]
    Aborted {
        processed: usize,
        total: usize,
        resume_path: Option<PathBuf>,
        #[source]
        source: Box<LearningError>,
    },
    #[error("buffer io: {0}")]
    Io(String),
}

/// Extraction records for one task, one per processed training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineBuffer {
    pub task_id: String,
    pub records: Vec<ExtractionRecord>,
}

impl GuidelineBuffer {
    pub fn new(task_id: impl Into<String>) -> Self {
        GuidelineBuffer {
            task_id: task_id.into(),
            records: Vec::new(),
        }
    }

    pub fn count(&self, kind: ExtractionKind) -> usize {
        self.records.iter().filter(|r| r.kind() == kind).count()
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.records.iter().any(|r| r.sample_id == sample_id)
    }

    /// Adds a record, keeping records ordered by sample id.
    pub fn push(&mut self, record: ExtractionRecord) {
        let pos = self
            .records
            .partition_point(|r| r.sample_id.as_str() < record.sample_id.as_str());
        self.records.insert(pos, record);
    }

    pub fn save(&self, path: &Path) -> Result<(), LearningError> {
        let bytes = to_pretty_json(self).map_err(|e| LearningError::Io(e.to_string()))?;
        atomic_write(path, &bytes).map_err(|e| LearningError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, LearningError> {
        let bytes = std::fs::read(path).map_err(|e| LearningError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| LearningError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct LearnConfig {
    pub model: String,
    pub max_steps: usize,
    /// Require exactly this many steps (step-count sweeps).
    pub target_steps: Option<usize>,
    /// Rendered pattern records beyond this many characters are aggregated in chunks first.
    pub chunk_chars: usize,
    pub concurrency: usize,
    pub resume_path: Option<PathBuf>,
    pub dataset_digest: String,
}

impl LearnConfig {
    pub fn new(model: impl Into<String>) -> Self {
        LearnConfig {
            model: model.into(),
            max_steps: DEFAULT_MAX_STEPS,
            target_steps: None,
            chunk_chars: 60_000,
            concurrency: 1,
            resume_path: None,
            dataset_digest: String::new(),
        }
    }
}

fn reject_empty_input(x: &Sample) -> Result<(), LearningError> {
    if x.input_text.trim().is_empty() {
        return Err(LearningError::Precondition(format!("sample `{}` has empty input", x.id)));
    }
    Ok(())
}

/// Solves `x` once without guidance and splits the reply into steps.
pub fn generate_initial_trajectory(p: &Pipeline, x: &Sample, model: &str) -> Result<Trajectory, LearningError> {
    reject_empty_input(x)?;
    let reply = p.call(model, TemplateName::InitialSolve, &[("input", &x.input_text)])?;
    let steps = split_steps(&reply)
        .into_iter()
        .enumerate()
        .map(|(i, s)| StepRecord::unrefined(i + 1, s))
        .collect();
    Ok(Trajectory {
        sample_id: x.id.clone(),
        steps,
        final_answer: extract_answer(&reply),
        executor_model: model.to_string(),
        refiner_model: model.to_string(),
        warnings: Vec::new(),
    })
}

/// Trajectory as shown to the extraction and reflection prompts.
pub fn render_trajectory(r: &Trajectory) -> String {
    let mut out = r
        .steps
        .iter()
        .map(|s| format!("Step {}: {}", s.index, s.refined_content))
        .collect::<Vec<_>>()
        .join("\n");
    out.push_str(&format!(
        "\nFinal answer: {}",
        if r.final_answer.is_empty() { "(none)" } else { &r.final_answer }
    ));
    out
}

fn check_outcome(p: &Pipeline, x: &Sample, r: &Trajectory, want_correct: bool) -> Result<(), LearningError> {
    let correct = p.grader.grade(&r.final_answer, &x.gold_answer, x.kind);
    if correct != want_correct {
        return Err(LearningError::Precondition(format!(
            "trajectory for `{}` is graded {} but {} requires {}",
            x.id,
            if correct { "correct" } else { "incorrect" },
            if want_correct { "pattern extraction" } else { "reflection" },
            if want_correct { "correct" } else { "incorrect" },
        )));
    }
    Ok(())
}

/// Distills reusable steps from a correct trajectory.
pub fn extract_patterns(p: &Pipeline, x: &Sample, r: &Trajectory, model: &str) -> Result<ExtractionRecord, LearningError> {
    check_outcome(p, x, r, true)?;
    let reply = p.call(
        model,
        TemplateName::Extract,
        &[
            ("input", &x.input_text),
            ("trajectory", &render_trajectory(r)),
            ("gold", &x.gold_answer),
        ],
    )?;
    let steps: Vec<PatternStep> = parse_guideline_steps(&reply)
        .into_iter()
        .filter(|s| !s.execution.trim().is_empty())
        .map(|s| PatternStep {
            title: s.title,
            execution: s.execution,
        })
        .collect();
    if steps.is_empty() {
        tracing::warn!(sample = %x.id, "pattern extraction produced no steps");
    }
    Ok(ExtractionRecord {
        sample_id: x.id.clone(),
        content: ExtractionContent::Pattern(steps),
    })
}

/// Derives mistake/prevention pairs from an incorrect trajectory.
pub fn reflect_on_failure(p: &Pipeline, x: &Sample, r: &Trajectory, model: &str) -> Result<ExtractionRecord, LearningError> {
    check_outcome(p, x, r, false)?;
    let reply = p.call(
        model,
        TemplateName::Reflect,
        &[
            ("input", &x.input_text),
            ("trajectory", &render_trajectory(r)),
            ("gold", &x.gold_answer),
        ],
    )?;
    let reflections = parse_reflections(&reply);
    if reflections.is_empty() {
        tracing::warn!(sample = %x.id, "reflection produced no mistake/prevention pairs");
    }
    Ok(ExtractionRecord {
        sample_id: x.id.clone(),
        content: ExtractionContent::Reflection(reflections),
    })
}

/// Trajectory, grade, then extract or reflect for one training sample.
pub fn process_sample(p: &Pipeline, x: &Sample, model: &str) -> Result<ExtractionRecord, LearningError> {
    let r = generate_initial_trajectory(p, x, model)?;
    if p.grader.grade(&r.final_answer, &x.gold_answer, x.kind) {
        extract_patterns(p, x, &r, model)
    } else {
        reflect_on_failure(p, x, &r, model)
    }
}

fn render_patterns(records: &[(&str, &[PatternStep])]) -> String {
    records
        .iter()
        .map(|(id, steps)| {
            let body = steps
                .iter()
                .enumerate()
                .map(|(i, s)| format!("Step {}: {}\nExecution: {}", i + 1, s.title, s.execution))
                .collect::<Vec<_>>()
                .join("\n");
            format!("Example {id}:\n{body}")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_reflections(reflections: &[&Reflection]) -> String {
    if reflections.is_empty() {
        return "none".to_string();
    }
    reflections
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let hint = r
                .step_hint
                .as_deref()
                .map(|h| format!(" (step: {h})"))
                .unwrap_or_default();
            format!("[R{}]{hint} Mistake: {} | Prevention: {}", i + 1, r.mistake, r.prevention)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn step_constraint(cfg: &LearnConfig) -> String {
    match cfg.target_steps {
        Some(n) => format!("Use exactly {n} steps."),
        None => format!("Use between 1 and {} steps.", cfg.max_steps),
    }
}

fn check_parsed(steps: &[ParsedStep], max_steps: usize, target: Option<usize>) -> Result<(), String> {
    if steps.is_empty() {
        return Err("no `Step N:` blocks found".into());
    }
    if steps.len() > max_steps {
        return Err(format!("{} steps exceeds the cap of {max_steps}", steps.len()));
    }
    if let Some(t) = target {
        if steps.len() != t {
            return Err(format!("expected exactly {t} steps, got {}", steps.len()));
        }
    }
    if let Some(s) = steps.iter().find(|s| s.execution.trim().is_empty()) {
        return Err(format!("step `{}` has no execution text", s.title));
    }
    Ok(())
}

/// One aggregation call, with a single corrective retry on parse failure.
fn aggregate_call(
    p: &Pipeline,
    cfg: &LearnConfig,
    task_id: &str,
    records: &str,
    reflections: &str,
    target: Option<usize>,
) -> Result<Vec<ParsedStep>, LearningError> {
    let constraint = match target {
        Some(n) => format!("Use exactly {n} steps."),
        None => step_constraint(&LearnConfig {
            target_steps: None,
            ..cfg.clone()
        }),
    };
    let prompt = p.templates.render(
        TemplateName::Aggregate,
        &[
            ("task_id", task_id),
            ("records", records),
            ("reflections", reflections),
            ("step_constraint", &constraint),
        ],
    )
    .map_err(CallError::from)?;
    let mut messages = vec![Message::user(prompt)];
    let raw = p.send(p.request(&cfg.model, messages.clone()))?;
    let steps = parse_guideline_steps(&raw);
    let reason = match check_parsed(&steps, cfg.max_steps, target) {
        Ok(()) => return Ok(steps),
        Err(reason) => reason,
    };

    tracing::warn!(%reason, "aggregation reply unparseable, retrying once");
    messages.push(Message::assistant(raw));
    messages.push(Message::user(format!(
        "Your reply could not be used: {reason}. Reply again with only the guideline, \
         one `Step <n>: <title>` block per step, each with an `Execution:` line. {constraint}"
    )));
    let raw = p.send(p.request(&cfg.model, messages))?;
    let steps = parse_guideline_steps(&raw);
    match check_parsed(&steps, cfg.max_steps, target) {
        Ok(()) => Ok(steps),
        Err(reason) => Err(LearningError::Aggregation { reason, raw }),
    }
}

/// Attaches each reflection to exactly one step: the step the aggregation
/// reply assigned it to, else the step whose title matches its hint, else the
/// final step. Copies of reflection text the model wrote elsewhere are removed.
fn fold_reflections(steps: &mut [GuidelineStep], assigned: &[Vec<usize>], reflections: &[&Reflection]) {
    for r in reflections {
        for s in steps.iter_mut() {
            s.preventions.retain(|p| p.trim() != r.prevention.trim());
            if !r.mistake.trim().is_empty() {
                s.mistakes.retain(|m| m.trim() != r.mistake.trim());
            }
        }
    }
    let last = steps.len() - 1;
    for (i, r) in reflections.iter().enumerate() {
        let id = i + 1;
        let target = assigned
            .iter()
            .position(|ids| ids.contains(&id))
            .or_else(|| {
                r.step_hint.as_deref().and_then(|h| {
                    steps
                        .iter()
                        .position(|s| s.title.trim().eq_ignore_ascii_case(h.trim()))
                })
            })
            .unwrap_or(last);
        if !r.mistake.trim().is_empty() {
            steps[target].mistakes.push(r.mistake.trim().to_string());
        }
        steps[target].preventions.push(r.prevention.trim().to_string());
    }
}

/// Synthesizes one guideline from every record in the buffer.
pub fn aggregate(p: &Pipeline, buffer: &GuidelineBuffer, cfg: &LearnConfig) -> Result<Guideline, LearningError> {
    if buffer.records.is_empty() {
        return Err(LearningError::CannotAggregate("buffer is empty".into()));
    }
    let mut patterns: Vec<(&str, &[PatternStep])> = Vec::new();
    let mut reflections: Vec<&Reflection> = Vec::new();
    for rec in &buffer.records {
        match &rec.content {
            ExtractionContent::Pattern(steps) if steps.is_empty() => {
                tracing::info!(sample = %rec.sample_id, "skipping empty pattern record");
            }
            ExtractionContent::Pattern(steps) => patterns.push((rec.sample_id.as_str(), steps.as_slice())),
            ExtractionContent::Reflection(rs) => reflections.extend(rs.iter()),
        }
    }
    if patterns.is_empty() {
        return Err(LearningError::CannotAggregate(format!(
            "buffer for `{}` has no usable pattern records",
            buffer.task_id
        )));
    }

    let mut records_text = render_patterns(&patterns);
    if records_text.len() > cfg.chunk_chars && patterns.len() > 1 {
        // Summarize chunks of pattern records into partial guidelines first.
        let mut chunks: Vec<Vec<(&str, &[PatternStep])>> = vec![Vec::new()];
        let mut size = 0;
        for rec in &patterns {
            let len = render_patterns(std::slice::from_ref(rec)).len();
            if size + len > cfg.chunk_chars && !chunks.last().unwrap().is_empty() {
                chunks.push(Vec::new());
                size = 0;
            }
            size += len;
            chunks.last_mut().unwrap().push(*rec);
        }
        tracing::info!(chunks = chunks.len(), "aggregating pattern records in chunks");
        let mut partials = Vec::new();
        for (k, chunk) in chunks.iter().enumerate() {
            let steps = aggregate_call(p, cfg, &buffer.task_id, &render_patterns(chunk), "none", None)?;
            let body = steps
                .iter()
                .enumerate()
                .map(|(i, s)| format!("Step {}: {}\nExecution: {}", i + 1, s.title, s.execution))
                .collect::<Vec<_>>()
                .join("\n");
            partials.push(format!("Partial guideline {}:\n{body}", k + 1));
        }
        records_text = partials.join("\n\n");
    }

    let parsed = aggregate_call(
        p,
        cfg,
        &buffer.task_id,
        &records_text,
        &render_reflections(&reflections),
        cfg.target_steps,
    )?;
    let assigned: Vec<Vec<usize>> = parsed.iter().map(|s| s.reflection_ids.clone()).collect();
    let mut steps: Vec<GuidelineStep> = parsed
        .into_iter()
        .enumerate()
        .map(|(i, s)| GuidelineStep {
            index: i + 1,
            title: s.title,
            execution: s.execution,
            mistakes: s.mistakes,
            preventions: s.preventions.into_iter().filter(|p| !p.trim().is_empty()).collect(),
        })
        .collect();
    fold_reflections(&mut steps, &assigned, &reflections);

    let g = Guideline {
        task_id: buffer.task_id.clone(),
        provenance: Provenance::now(
            &cfg.model,
            &cfg.dataset_digest,
            p.templates.versions_of(&LEARNING_TEMPLATES),
        ),
        steps,
    };
    let violations = validate_guideline(&g);
    if !violations.is_empty() {
        return Err(LearningError::Aggregation {
            reason: violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
            raw: g.to_prompt_text(),
        });
    }
    Ok(g)
}

/// The learned guideline together with the buffer it was aggregated from.
#[derive(Debug, Clone)]
pub struct Learned {
    pub guideline: Guideline,
    pub buffer: GuidelineBuffer,
}

/// Runs guideline learning over `train`.
///
/// With `resume_path` set, the buffer is persisted after every sample and
/// samples already present in an existing buffer file are skipped. The file
/// is removed once aggregation succeeds.
pub fn learn_guidelines(p: &Pipeline, task_id: &str, train: &[Sample], cfg: &LearnConfig) -> Result<Learned, LearningError> {
    if train.is_empty() {
        return Err(LearningError::Precondition("training set is empty".into()));
    }
    let mut buffer = match cfg.resume_path.as_deref().filter(|p| p.exists()) {
        Some(path) => {
            let b = GuidelineBuffer::load(path)?;
            if b.task_id != task_id {
                return Err(LearningError::Precondition(format!(
                    "resume buffer {} is for task `{}`, not `{task_id}`",
                    path.display(),
                    b.task_id
                )));
            }
            tracing::info!(records = b.records.len(), "resuming from partial buffer");
            b
        }
        None => GuidelineBuffer::new(task_id),
    };
    buffer.records.retain(|r| train.iter().any(|s| s.id == r.sample_id));

    let todo: Vec<&Sample> = train.iter().filter(|s| !buffer.contains(&s.id)).collect();
    let shared = Mutex::new(buffer);
    let work = |x: &&Sample| -> Result<(), LearningError> {
        let rec = process_sample(p, x, &cfg.model)?;
        let mut b = shared.lock().unwrap();
        b.push(rec);
        if let Some(path) = &cfg.resume_path {
            b.save(path)?;
        }
        Ok(())
    };
    let results: Vec<Result<(), LearningError>> = if cfg.concurrency > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.concurrency)
            .build()
            .map_err(|e| LearningError::Io(e.to_string()))?;
        pool.install(|| todo.par_iter().map(work).collect())
    } else {
        todo.iter().map(work).collect()
    };
    let buffer = shared.into_inner().unwrap();

    if let Some(err) = results.into_iter().find_map(Result::err) {
        if let Some(path) = &cfg.resume_path {
            buffer.save(path)?;
        }
        return Err(LearningError::Aborted {
            processed: buffer.records.len(),
            total: train.len(),
            resume_path: cfg.resume_path.clone(),
            source: Box::new(err),
        });
    }

    let guideline = aggregate(p, &buffer, cfg)?;
    if let Some(path) = &cfg.resume_path {
        let _ = std::fs::remove_file(path);
    }
    Ok(Learned { guideline, buffer })
}
