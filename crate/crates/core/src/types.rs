use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Answer kind of a task, which selects the grading rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    Numeric,
    FreeText,
    Code,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::Numeric => "numeric",
            TaskKind::FreeText => "free_text",
            TaskKind::Code => "code",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiple_choice" | "mc" => Ok(TaskKind::MultipleChoice),
            "numeric" => Ok(TaskKind::Numeric),
            "free_text" => Ok(TaskKind::FreeText),
            "code" => Ok(TaskKind::Code),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// One task input with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task_id: String,
    pub input_text: String,
    pub gold_answer: String,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        task_id: impl Into<String>,
        input_text: impl Into<String>,
        gold_answer: impl Into<String>,
        kind: TaskKind,
    ) -> Self {
        Sample {
            id: id.into(),
            task_id: task_id.into(),
            input_text: input_text.into(),
            gold_answer: gold_answer.into(),
            kind,
            metadata: BTreeMap::new(),
        }
    }
}

/// A single reasoning step with its raw and refined content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub raw_content: String,
    pub refined_content: String,
    pub rounds_applied: u32,
}

impl StepRecord {
    /// A step that has not been through refinement.
    pub fn unrefined(index: usize, raw: impl Into<String>) -> Self {
        let raw = raw.into();
        StepRecord {
            index,
            refined_content: raw.clone(),
            raw_content: raw,
            rounds_applied: 0,
        }
    }

    pub fn refined(index: usize, raw: impl Into<String>, refined: String, rounds: u32) -> Self {
        let raw = raw.into();
        if rounds == 0 {
            return StepRecord::unrefined(index, raw);
        }
        StepRecord {
            index,
            raw_content: raw,
            refined_content: refined,
            rounds_applied: rounds,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.index >= 1 && (self.rounds_applied > 0 || self.refined_content == self.raw_content)
    }
}

/// A reasoning record for one sample: ordered steps plus the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sample_id: String,
    pub steps: Vec<StepRecord>,
    pub final_answer: String,
    pub executor_model: String,
    pub refiner_model: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Trajectory {
    /// Steps are indexed 1..=n without gaps and each step honours the refinement invariant.
    pub fn is_well_formed(&self) -> bool {
        self.steps
            .iter()
            .enumerate()
            .all(|(i, s)| s.index == i + 1 && s.is_consistent())
    }

    pub fn refined_steps(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.refined_content.as_str())
    }
}

/// Trajectory dump file: the trajectory wrapped in the versioned container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryDocument {
    pub format_version: u32,
    #[serde(flatten)]
    pub trajectory: Trajectory,
}

impl TrajectoryDocument {
    pub fn new(trajectory: Trajectory) -> Self {
        TrajectoryDocument {
            format_version: crate::FORMAT_VERSION,
            trajectory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionKind {
    Pattern,
    Reflection,
}

/// A candidate guideline step pulled out of a successful trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternStep {
    pub title: String,
    pub execution: String,
}

/// A mistake and how to prevent it, pulled out of a failed trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reflection {
    pub mistake: String,
    pub prevention: String,
    /// Step title the reflecting model associated the mistake with, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "content", rename_all = "snake_case")]
pub enum ExtractionContent {
    Pattern(Vec<PatternStep>),
    Reflection(Vec<Reflection>),
}

/// The per-sample output of pattern extraction or failure reflection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub sample_id: String,
    #[serde(flatten)]
    pub content: ExtractionContent,
}

impl ExtractionRecord {
    pub fn kind(&self) -> ExtractionKind {
        match self.content {
            ExtractionContent::Pattern(_) => ExtractionKind::Pattern,
            ExtractionContent::Reflection(_) => ExtractionKind::Reflection,
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.content {
            ExtractionContent::Pattern(p) => p.is_empty(),
            ExtractionContent::Reflection(r) => r.is_empty(),
        }
    }
}
