//! Step-wise guidelines and their on-disk store.
//!
//! A guideline file is a single JSON document:
//!
//! ```json
//! {"format_version": 1, "task_id": "GS",
//!  "provenance": {"source_model": "...", "dataset_digest": "...", "template_version": "...", "created_at": "..."},
//!  "steps": [{"index": 1, "title": "...", "execution": "...", "mistakes": [], "preventions": []}]}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fsutil::{atomic_write, to_pretty_json};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineStep {
    pub index: usize,
    pub title: String,
    pub execution: String,
    #[serde(default)]
    pub mistakes: Vec<String>,
    #[serde(default)]
    pub preventions: Vec<String>,
}

impl GuidelineStep {
    pub fn new(index: usize, title: impl Into<String>, execution: impl Into<String>) -> Self {
        GuidelineStep {
            index,
            title: title.into(),
            execution: execution.into(),
            mistakes: Vec::new(),
            preventions: Vec::new(),
        }
    }

    /// Renders the step in the labelled text layout used inside prompts.
    pub fn to_prompt_text(&self) -> String {
        let mut out = format!("Step {}: {}\nExecution: {}\n", self.index, self.title, self.execution);
        for m in &self.mistakes {
            out.push_str(&format!("Mistake: {m}\n"));
        }
        for p in &self.preventions {
            out.push_str(&format!("Prevention: {p}\n"));
        }
        out
    }
}

/// Where a guideline came from. Only `source_model` and `template_version`
/// take part in equality; the digest and timestamp vary between otherwise
/// identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub source_model: String,
    pub dataset_digest: String,
    pub template_version: String,
    pub created_at: DateTime<Utc>,
}

impl PartialEq for Provenance {
    fn eq(&self, other: &Self) -> bool {
        self.source_model == other.source_model && self.template_version == other.template_version
    }
}

impl Eq for Provenance {}

impl Provenance {
    /// Provenance stamped with the current time, or with `SOURCE_DATE_EPOCH` when set.
    pub fn now(
        source_model: impl Into<String>,
        dataset_digest: impl Into<String>,
        template_version: impl Into<String>,
    ) -> Self {
        let created_at = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse::<i64>().ok())
            .and_then(|secs| DateTime::from_timestamp(secs, 0))
            .unwrap_or_else(Utc::now);
        Provenance {
            source_model: source_model.into(),
            dataset_digest: dataset_digest.into(),
            template_version: template_version.into(),
            created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    pub task_id: String,
    pub provenance: Provenance,
    pub steps: Vec<GuidelineStep>,
}

impl Guideline {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_prompt_text(&self) -> String {
        self.steps
            .iter()
            .map(GuidelineStep::to_prompt_text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_json_bytes(&self) -> serde_json::Result<Vec<u8>> {
        to_pretty_json(&GuidelineDocument {
            format_version: FORMAT_VERSION,
            task_id: &self.task_id,
            provenance: &self.provenance,
            steps: &self.steps,
        })
    }

    /// Parses and validates a guideline document.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, GuidelineError> {
        let g = parse_document(bytes)?;
        let violations = validate_guideline(&g);
        if !violations.is_empty() {
            return Err(GuidelineError::Invalid(violations));
        }
        Ok(g)
    }
}

#[derive(Serialize)]
struct GuidelineDocument<'a> {
    format_version: u32,
    task_id: &'a str,
    provenance: &'a Provenance,
    steps: &'a [GuidelineStep],
}

/// A single broken guideline invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyGuideline,
    EmptyTaskId,
    IndexGap(usize),
    DuplicateIndex(usize),
    IndexOutOfRange(usize),
    EmptyExecution(usize),
    EmptyPrevention(usize),
    OutOfOrder(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyGuideline => write!(f, "empty guideline"),
            Violation::EmptyTaskId => write!(f, "empty task_id"),
            Violation::IndexGap(i) => write!(f, "index gap at {i}"),
            Violation::DuplicateIndex(i) => write!(f, "duplicate index {i}"),
            Violation::IndexOutOfRange(i) => write!(f, "index {i} out of range"),
            Violation::EmptyExecution(i) => write!(f, "step {i}: empty execution"),
            Violation::EmptyPrevention(i) => write!(f, "step {i}: empty prevention"),
            Violation::OutOfOrder(i) => write!(f, "step {i} stored out of order"),
        }
    }
}

/// Returns every invariant violation; an empty list means the guideline is valid.
pub fn validate_guideline(g: &Guideline) -> Vec<Violation> {
    let mut out = Vec::new();
    if g.task_id.trim().is_empty() {
        out.push(Violation::EmptyTaskId);
    }
    if g.steps.is_empty() {
        out.push(Violation::EmptyGuideline);
        return out;
    }

    let mut seen = BTreeSet::new();
    for step in &g.steps {
        if step.index == 0 {
            out.push(Violation::IndexOutOfRange(0));
        } else if !seen.insert(step.index) {
            out.push(Violation::DuplicateIndex(step.index));
        }
        if step.execution.trim().is_empty() {
            out.push(Violation::EmptyExecution(step.index));
        }
        if step.preventions.iter().any(|p| p.trim().is_empty()) {
            out.push(Violation::EmptyPrevention(step.index));
        }
    }

    let t = g.steps.len();
    for i in 1..=t {
        if !seen.contains(&i) {
            out.push(Violation::IndexGap(i));
        }
    }
    for &i in seen.iter().filter(|&&i| i > t) {
        out.push(Violation::IndexOutOfRange(i));
    }
    let index_ok = !out.iter().any(|v| {
        matches!(
            v,
            Violation::IndexGap(_) | Violation::DuplicateIndex(_) | Violation::IndexOutOfRange(_)
        )
    });
    if index_ok {
        if let Some((_, s)) = g.steps.iter().enumerate().find(|(p, s)| s.index != p + 1) {
            out.push(Violation::OutOfOrder(s.index));
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum GuidelineError {
    #[error("{field}: {message}")]
    Parse { field: String, message: String },
    #[error("unsupported format_version {found} (supported: {supported})")]
    UnsupportedVersion { found: u64, supported: u32 },
    #[error("invalid guideline: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("guideline io: {0}")]
    Io(#[from] io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

fn parse_error(field: impl Into<String>, message: impl fmt::Display) -> GuidelineError {
    GuidelineError::Parse {
        field: field.into(),
        message: message.to_string(),
    }
}

fn parse_document(bytes: &[u8]) -> Result<Guideline, GuidelineError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| parse_error("document", e))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| parse_error("document", "expected a JSON object"))?;

    let version = obj
        .get("format_version")
        .ok_or_else(|| parse_error("format_version", "missing field"))?
        .as_u64()
        .ok_or_else(|| parse_error("format_version", "expected a non-negative integer"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(GuidelineError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let task_id = obj
        .get("task_id")
        .ok_or_else(|| parse_error("task_id", "missing field"))?
        .as_str()
        .ok_or_else(|| parse_error("task_id", "expected a string"))?
        .to_string();

    let provenance = obj
        .get("provenance")
        .ok_or_else(|| parse_error("provenance", "missing field"))?;
    let provenance: Provenance =
        serde_json::from_value(provenance.clone()).map_err(|e| parse_error("provenance", e))?;

    let steps = obj
        .get("steps")
        .ok_or_else(|| parse_error("steps", "missing field"))?
        .as_array()
        .ok_or_else(|| parse_error("steps", "expected an array"))?;
    let mut parsed = Vec::with_capacity(steps.len());
    for (pos, raw) in steps.iter().enumerate() {
        let label = raw
            .get("index")
            .and_then(Value::as_u64)
            .unwrap_or(pos as u64 + 1);
        let step: GuidelineStep = serde_json::from_value(raw.clone())
            .map_err(|e| parse_error(format!("step {label}"), e))?;
        parsed.push(step);
    }

    Ok(Guideline {
        task_id,
        provenance,
        steps: parsed,
    })
}

/// Validates and atomically writes `g` to `path`, returning the bytes stored.
pub fn write_guideline(g: &Guideline, path: &Path) -> Result<Vec<u8>, GuidelineError> {
    let violations = validate_guideline(g);
    if !violations.is_empty() {
        return Err(GuidelineError::Invalid(violations));
    }
    let bytes = g
        .to_json_bytes()
        .map_err(|e| parse_error("document", e))?;
    atomic_write(path, &bytes)?;
    Ok(bytes)
}

pub fn read_guideline(path: &Path) -> Result<Guideline, GuidelineError> {
    let bytes = std::fs::read(path)?;
    Guideline::from_json_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(i: usize) -> GuidelineStep {
        GuidelineStep::new(i, format!("Step title {i}"), format!("do thing {i}"))
    }

    fn guideline(steps: Vec<GuidelineStep>) -> Guideline {
        Guideline {
            task_id: "T".into(),
            provenance: Provenance::now("m", "00", "v1"),
            steps,
        }
    }

    #[test]
    fn index_gap_reported() {
        let g = guideline(vec![step(1), step(2), step(4)]);
        let v = validate_guideline(&g);
        assert!(v.contains(&Violation::IndexGap(3)), "{v:?}");
        assert!(v.iter().any(|v| v.to_string() == "index gap at 3"));
    }

    #[test]
    fn empty_guideline_reported() {
        let v = validate_guideline(&guideline(vec![]));
        assert_eq!(v, vec![Violation::EmptyGuideline]);
        assert_eq!(v[0].to_string(), "empty guideline");
    }

    #[test]
    fn out_of_order_steps_rejected() {
        let g = guideline(vec![step(2), step(1)]);
        assert!(!validate_guideline(&g).is_empty());
    }

    #[test]
    fn empty_prevention_and_execution() {
        let mut s = step(1);
        s.execution = "  ".into();
        s.preventions.push(String::new());
        let v = validate_guideline(&guideline(vec![s]));
        assert!(v.contains(&Violation::EmptyExecution(1)));
        assert!(v.contains(&Violation::EmptyPrevention(1)));
    }

    #[test]
    fn missing_execution_cites_step() {
        let doc = r#"{"format_version":1,"task_id":"T",
            "provenance":{"source_model":"m","dataset_digest":"00","template_version":"v1","created_at":"2025-01-01T00:00:00Z"},
            "steps":[{"index":1,"title":"a","execution":"x"},{"index":2,"title":"b","execution":"y"},{"index":3,"title":"c"}]}"#;
        let err = Guideline::from_json_bytes(doc.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 3"), "{msg}");
        assert!(msg.contains("execution"), "{msg}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let doc = r#"{"format_version":9,"task_id":"T","provenance":{},"steps":[]}"#;
        assert!(matches!(
            Guideline::from_json_bytes(doc.as_bytes()),
            Err(GuidelineError::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn write_refuses_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_guideline(&guideline(vec![]), &dir.path().join("g.json")).unwrap_err();
        assert!(matches!(err, GuidelineError::Invalid(_)));
    }

    #[test]
    fn provenance_equality_ignores_timestamp_and_digest() {
        let a = Provenance::now("m", "aa", "v1");
        let mut b = a.clone();
        b.dataset_digest = "bb".into();
        b.created_at = DateTime::from_timestamp(0, 0).unwrap();
        assert_eq!(a, b);
        b.template_version = "v2".into();
        assert_ne!(a, b);
    }
}
