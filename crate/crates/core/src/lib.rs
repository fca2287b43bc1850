//! Guideline learning and guided step-wise execution for chat-completion models.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`types`] and [`guideline`]: shared domain values and the guideline store.
//! - [`provider`]: chat-completion access (HTTP, scripted mock, cache, record/replay tapes).
//! - [`template`]: versioned prompt templates with named slots.
//! - [`learning`]: trajectories, pattern extraction, failure reflection and aggregation.
//! - [`execution`]: guided step-by-step solving with per-step refinement.
//! - [`harness`]: datasets, splits, grading, experiments, sweeps and reports.
//! - [`config`]: the run configuration file shared by the CLI and the Python bindings.
//! - [`testkit`]: scripted mock tasks for offline end-to-end runs.

pub mod config;
pub mod execution;
pub mod fsutil;
pub mod guideline;
pub mod harness;
pub mod learning;
pub mod pipeline;
pub mod provider;
pub mod template;
pub mod testkit;
pub mod types;

pub use execution::{guided_solve, ExecutionConfig, ExecutionError};
pub use guideline::{
    read_guideline, validate_guideline, write_guideline, Guideline, GuidelineError, GuidelineStep,
    Provenance, Violation,
};
pub use harness::{
    extract_answer, grade, load_dataset, split, Baseline, Dataset, DatasetFormat, EvalReport,
    ExperimentConfig, Harness,
};
pub use learning::{learn_guidelines, GuidelineBuffer, LearnConfig, LearningError};
pub use pipeline::Pipeline;
pub use provider::{ChatRequest, ChatResponse, Message, Provider, ProviderError, Role};
pub use template::{TemplateName, TemplateSet};
pub use types::{ExtractionContent, ExtractionRecord, Sample, StepRecord, TaskKind, Trajectory};

/// Version written into every guideline, trajectory and report document.
pub const FORMAT_VERSION: u32 = 1;
