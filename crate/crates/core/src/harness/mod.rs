//! Evaluation harness: datasets, splits, grading, experiment runs and reports.

pub mod dataset;
pub mod experiment;
pub mod grade;
pub mod report;

pub use dataset::{load_dataset, split, train_size, Dataset, DatasetError, DatasetFormat, QaFields};
pub use experiment::{Baseline, ExperimentConfig, Harness, HarnessError, SweepAxis};
pub use grade::{extract_answer, grade, CodeGrader, Grader};
pub use report::{emit_report, render_summary, EvalReport, ErroredSample, SampleResult, REPORT_SCHEMA_VERSION};
