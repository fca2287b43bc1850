//! Run reports and the grouped summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fsutil::{atomic_write, to_pretty_json};
use crate::harness::experiment::{ExperimentConfig, HarnessError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
    pub provider_calls: usize,
}

/// A sample whose run failed; excluded from accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErroredSample {
    pub sample_id: String,
    pub error: String,
    pub provider_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub run_id: String,
    pub task_id: String,
    /// Task the guideline was learned on, when it differs from `task_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_task: Option<String>,
    pub method: String,
    pub config: ExperimentConfig,
    pub dataset_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guideline_digest: Option<String>,
    pub template_versions: String,
    pub per_sample: Vec<SampleResult>,
    #[serde(default)]
    pub errored: Vec<ErroredSample>,
    pub correct: usize,
    pub accuracy: f64,
}

impl EvalReport {
    /// `correct / |per_sample|`, or 0 for an empty run.
    pub fn recount(per_sample: &[SampleResult]) -> (usize, f64) {
        let correct = per_sample.iter().filter(|r| r.correct).count();
        let acc = if per_sample.is_empty() {
            0.0
        } else {
            correct as f64 / per_sample.len() as f64
        };
        (correct, acc)
    }

    pub fn accuracy_is_consistent(&self) -> bool {
        let (correct, acc) = EvalReport::recount(&self.per_sample);
        correct == self.correct && acc == self.accuracy
    }

    /// Column label: the task, or `source→target` for transfer runs.
    pub fn task_label(&self) -> String {
        match &self.source_task {
            Some(src) => format!("{src}→{}", self.task_id),
            None => self.task_id.clone(),
        }
    }

    pub fn total_provider_calls(&self) -> usize {
        self.per_sample.iter().map(|r| r.provider_calls).sum::<usize>()
            + self.errored.iter().map(|r| r.provider_calls).sum::<usize>()
    }

    /// `<flags>` triple as shown in ablation tables, e.g. `learn=✓ step=✓ refine=✗`.
    pub fn flag_triple(&self) -> String {
        self.config.flag_triple()
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        to_pretty_json(self).map_err(|e| HarnessError::Report(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
    }
}

fn check_schema(reports: &[EvalReport]) -> Result<(), HarnessError> {
    let versions: BTreeSet<u32> = reports.iter().map(|r| r.schema_version).collect();
    if versions.len() > 1 {
        return Err(HarnessError::Report(format!(
            "reports mix schema versions {versions:?}"
        )));
    }
    Ok(())
}

/// Markdown table with one row per method, one column per task and an Avg column.
pub fn render_summary(reports: &[EvalReport]) -> Result<String, HarnessError> {
    check_schema(reports)?;
    let mut cells: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut tasks = BTreeSet::new();
    for r in reports {
        let task = r.task_label();
        tasks.insert(task.clone());
        cells.entry(r.method.clone()).or_default().insert(task, r.accuracy);
    }
    let tasks: Vec<String> = tasks.into_iter().collect();
    let mut out = String::from("| Method |");
    for t in &tasks {
        out.push_str(&format!(" {t} |"));
    }
    out.push_str(" Avg |\n|---|");
    out.push_str(&"---:|".repeat(tasks.len() + 1));
    out.push('\n');
    for (method, row) in &cells {
        out.push_str(&format!("| {method} |"));
        for t in &tasks {
            match row.get(t) {
                Some(acc) => out.push_str(&format!(" {:.1} |", acc * 100.0)),
                None => out.push_str(" - |"),
            }
        }
        let avg = row.values().sum::<f64>() / row.len() as f64;
        out.push_str(&format!(" {:.1} |\n", avg * 100.0));
    }
    Ok(out)
}

/// Writes `runs/<run-id>/report.json` for each report and `summary.md` in
/// `runs_dir`. Returns the report paths and the summary path.
pub fn emit_report(reports: &[EvalReport], runs_dir: &Path) -> Result<(Vec<PathBuf>, PathBuf), HarnessError> {
    check_schema(reports)?;
    let mut paths = Vec::with_capacity(reports.len());
    for r in reports {
        let path = runs_dir.join(&r.run_id).join("report.json");
        atomic_write(&path, &r.to_json_bytes()?).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    let summary = runs_dir.join("summary.md");
    atomic_write(&summary, render_summary(reports)?.as_bytes())
        .map_err(|e| HarnessError::Io(format!("{}: {e}", summary.display())))?;
    Ok((paths, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, task: &str, correct: &[bool]) -> EvalReport {
        let per_sample: Vec<SampleResult> = correct
            .iter()
            .enumerate()
            .map(|(i, c)| SampleResult {
                sample_id: format!("s{i}"),
                predicted: "x".into(),
                gold: "x".into(),
                correct: *c,
                provider_calls: 1,
            })
            .collect();
        let (n, acc) = EvalReport::recount(&per_sample);
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id: format!("{method}-{task}"),
            task_id: task.into(),
            source_task: None,
            method: method.into(),
            config: ExperimentConfig::guided("m"),
            dataset_digest: "d".into(),
            guideline_digest: None,
            template_versions: "v".into(),
            per_sample,
            errored: vec![],
            correct: n,
            accuracy: acc,
        }
    }

    #[test]
    fn three_reports_three_rows_with_avg() {
        let rs = vec![
            report("CoT", "GS", &[true, false]),
            report("Guided", "GS", &[true, true]),
            report("Few-shot CoT", "GS", &[false, false]),
        ];
        let table = render_summary(&rs).unwrap();
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "| Method | GS | Avg |");
        assert!(lines.contains(&"| CoT | 50.0 | 50.0 |"));
    }

    #[test]
    fn schema_mismatch_is_error() {
        let mut b = report("B", "T", &[true]);
        b.schema_version = 99;
        assert!(render_summary(&[report("A", "T", &[true]), b]).is_err());
    }

    #[test]
    fn summary_is_deterministic() {
        let rs = vec![report("A", "T", &[true]), report("B", "U", &[false])];
        let dir = tempfile::tempdir().unwrap();
        let (_, s1) = emit_report(&rs, &dir.path().join("a")).unwrap();
        let (_, s2) = emit_report(&rs, &dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(s1).unwrap(), std::fs::read(s2).unwrap());
    }

    #[test]
    fn transfer_label() {
        let mut r = report("Guided", "HY", &[true]);
        r.source_task = Some("ST".into());
        assert_eq!(r.task_label(), "ST→HY");
    }
}
