//! Dataset loading and deterministic train/test splits.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fsutil::sha256_hex;
use crate::types::{Sample, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub task_id: String,
    pub samples: Vec<Sample>,
    pub source_digest: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> Option<TaskKind> {
        self.samples.first().map(|s| s.kind)
    }

    /// Builds a dataset from in-memory samples, checking the dataset invariants.
    pub fn from_samples(task_id: impl Into<String>, samples: Vec<Sample>) -> Result<Self, DatasetError> {
        let task_id = task_id.into();
        check_samples(&task_id, &samples)?;
        let digest_src: String = samples
            .iter()
            .map(|s| format!("{}\u{1f}{}\u{1f}{}\u{1e}", s.id, s.input_text, s.gold_answer))
            .collect();
        Ok(Dataset {
            source_digest: sha256_hex(digest_src.as_bytes()),
            task_id,
            samples,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `{"examples": [{"input": ..., "target": ...}]}` or a bare array of such records.
    BbhJson,
    /// One JSON object per line with configurable field names.
    JsonlQa,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bbh_json" | "bbh" => Ok(DatasetFormat::BbhJson),
            "jsonl_qa" | "jsonl" => Ok(DatasetFormat::JsonlQa),
            other => Err(format!("unknown dataset format `{other}` (bbh_json | jsonl_qa)")),
        }
    }
}

/// Field names and kind for line-delimited QA files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaFields {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub kind: Option<TaskKind>,
}

impl Default for QaFields {
    fn default() -> Self {
        QaFields {
            id: "id".into(),
            question: "question".into(),
            answer: "answer".into(),
            kind: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset io {path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset parse: {0}")]
    Parse(String),
    #[error("record {record}: missing {field}")]
    MissingField { record: usize, field: String },
    #[error("record {record}: empty {field}")]
    EmptyField { record: usize, field: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{id}` does not match dataset {what}")]
    Mixed { id: String, what: &'static str },
    #[error("split: {0}")]
    Split(String),
}

/// Answer kinds of known tasks, by full name and by abbreviation.
pub fn known_task_kind(task_id: &str) -> Option<TaskKind> {
    let t = task_id.to_ascii_lowercase();
    Some(match t.as_str() {
        "geometric_shapes" | "gs" => TaskKind::MultipleChoice,
        "multistep_arithmetic_two" | "multistep_arithmetic" | "ma" => TaskKind::Numeric,
        "navigate" | "na" => TaskKind::FreeText,
        "causal_judgement" | "cj" => TaskKind::FreeText,
        "formal_fallacies" | "ff" => TaskKind::FreeText,
        "logical_deduction_seven_objects" | "ld" => TaskKind::MultipleChoice,
        "hyperbaton" | "hy" => TaskKind::MultipleChoice,
        "salient_translation_error_detection" | "st" => TaskKind::MultipleChoice,
        "gsm8k" => TaskKind::Numeric,
        "math500" | "math-500" | "math_500" => TaskKind::FreeText,
        "mbpp" | "humaneval" => TaskKind::Code,
        _ => return None,
    })
}

fn infer_kind(gold: &str) -> TaskKind {
    let g = gold.trim();
    let b = g.as_bytes();
    if b.len() == 3 && b[0] == b'(' && b[2] == b')' && b[1].is_ascii_alphabetic() {
        TaskKind::MultipleChoice
    } else if g.replace(',', "").parse::<f64>().is_ok() {
        TaskKind::Numeric
    } else {
        TaskKind::FreeText
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn text_field(rec: &Value, record: usize, field: &str) -> Result<String, DatasetError> {
    let v = rec.get(field).ok_or_else(|| DatasetError::MissingField {
        record,
        field: field.to_string(),
    })?;
    let s = match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        _ => {
            return Err(DatasetError::MissingField {
                record,
                field: field.to_string(),
            })
        }
    };
    Ok(s)
}

fn check_samples(task_id: &str, samples: &[Sample]) -> Result<(), DatasetError> {
    let mut ids = HashSet::new();
    let kind = samples.first().map(|s| s.kind);
    for s in samples {
        if !ids.insert(s.id.as_str()) {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
        if s.task_id != task_id {
            return Err(DatasetError::Mixed {
                id: s.id.clone(),
                what: "task_id",
            });
        }
        if Some(s.kind) != kind {
            return Err(DatasetError::Mixed {
                id: s.id.clone(),
                what: "kind",
            });
        }
    }
    Ok(())
}

/// Loads a dataset file. `task_id` selects the answer kind for known tasks;
/// otherwise the kind comes from `fields.kind` or is inferred from the first gold answer.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    task_id: &str,
    fields: &QaFields,
) -> Result<Dataset, DatasetError> {
    let bytes = read(path)?;
    let digest = sha256_hex(&bytes);
    let records: Vec<(usize, String, String, String)> = match format {
        DatasetFormat::BbhJson => {
            let doc: Value = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Parse(e.to_string()))?;
            let examples = match &doc {
                Value::Array(a) => a,
                Value::Object(o) => o
                    .get("examples")
                    .and_then(Value::as_array)
                    .ok_or_else(|| DatasetError::Parse("expected an `examples` array".into()))?,
                _ => return Err(DatasetError::Parse("expected an object or array".into())),
            };
            let mut out = Vec::with_capacity(examples.len());
            for (i, rec) in examples.iter().enumerate() {
                let input = text_field(rec, i, "input")?;
                let target = text_field(rec, i, "target")?;
                let id = rec
                    .get("id")
                    .and_then(|v| v.as_str().map(str::to_string).or_else(|| v.as_u64().map(|n| n.to_string())))
                    .unwrap_or_else(|| format!("{task_id}-{i:04}"));
                out.push((i, id, input, target));
            }
            out
        }
        DatasetFormat::JsonlQa => {
            let text = String::from_utf8(bytes).map_err(|e| DatasetError::Parse(e.to_string()))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let rec: Value =
                    serde_json::from_str(line).map_err(|e| DatasetError::Parse(format!("record {i}: {e}")))?;
                let input = text_field(&rec, i, &fields.question)?;
                let mut answer = text_field(&rec, i, &fields.answer)?;
                // GSM8K-style rationales end in "#### <answer>".
                if let Some((_, tail)) = answer.rsplit_once("####") {
                    answer = tail.trim().to_string();
                }
                let id = rec
                    .get(&fields.id)
                    .and_then(|v| v.as_str().map(str::to_string).or_else(|| v.as_u64().map(|n| n.to_string())))
                    .unwrap_or_else(|| format!("{task_id}-{i:04}"));
                out.push((i, id, input, answer));
            }
            out
        }
    };

    let kind = known_task_kind(task_id)
        .or(fields.kind)
        .or(match format {
            DatasetFormat::JsonlQa => Some(TaskKind::FreeText),
            DatasetFormat::BbhJson => None,
        })
        .unwrap_or_else(|| records.first().map(|r| infer_kind(&r.3)).unwrap_or(TaskKind::FreeText));

    let mut samples = Vec::with_capacity(records.len());
    for (i, id, input, gold) in records {
        if gold.trim().is_empty() {
            return Err(DatasetError::EmptyField {
                record: i,
                field: "target".into(),
            });
        }
        let mut s = Sample::new(id, task_id, input, gold.trim(), kind);
        s.metadata = BTreeMap::from([("record".to_string(), i.to_string())]);
        samples.push(s);
    }
    check_samples(task_id, &samples)?;
    Ok(Dataset {
        task_id: task_id.to_string(),
        samples,
        source_digest: digest,
    })
}

/// Number of training samples for a split: `round(fraction * n)`.
pub fn train_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Seeded shuffle, then the first `round(fraction * n)` samples train and the
/// rest test. Both parts keep the dataset's original order.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Split(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = d.len();
    let n_train = train_size(n, train_fraction);
    if n_train == 0 || n_train == n {
        return Err(DatasetError::Split(format!(
            "fraction {train_fraction} of {n} samples leaves an empty side ({n_train} train)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let part = |idx: &[usize], side: &str| Dataset {
        task_id: d.task_id.clone(),
        samples: idx.iter().map(|&i| d.samples[i].clone()).collect(),
        source_digest: sha256_hex(format!("{}:{side}:{train_fraction}:{seed}", d.source_digest).as_bytes()),
    };
    Ok((part(&train_idx, "train"), part(&test_idx, "test")))
}
