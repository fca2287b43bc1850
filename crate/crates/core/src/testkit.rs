//! Scripted arithmetic tasks for offline runs of the whole pipeline.
//!
//! Each sample `k` of task `T` asks for `k + (k + 3)`. The mock script answers
//! the initial solve correctly except on `initial_fail`, and the final answer
//! correctly except on `eval_fail`. Every other stage gets a fixed,
//! well-formed reply, so learning and guided runs are fully deterministic.

use std::collections::BTreeSet;

use crate::harness::Dataset;
use crate::provider::{MockRule, MockScript};
use crate::types::{Sample, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockTask {
    pub task_id: String,
    pub n: usize,
    pub initial_fail: BTreeSet<usize>,
    pub eval_fail: BTreeSet<usize>,
}

impl MockTask {
    pub fn new(task_id: impl Into<String>, n: usize) -> Self {
        MockTask {
            task_id: task_id.into(),
            n,
            initial_fail: BTreeSet::new(),
            eval_fail: BTreeSet::new(),
        }
    }

    pub fn initial_fail(mut self, ks: impl IntoIterator<Item = usize>) -> Self {
        self.initial_fail = ks.into_iter().collect();
        self
    }

    pub fn eval_fail(mut self, ks: impl IntoIterator<Item = usize>) -> Self {
        self.eval_fail = ks.into_iter().collect();
        self
    }

    fn needle(&self, k: usize) -> String {
        format!("[{}] problem {k}:", self.task_id)
    }

    pub fn gold(k: usize) -> usize {
        2 * k + 3
    }

    pub fn sample(&self, k: usize) -> Sample {
        Sample::new(
            format!("{}-{k:02}", self.task_id),
            &self.task_id,
            format!("{} compute {k} + {}", self.needle(k), k + 3),
            Self::gold(k).to_string(),
            TaskKind::Numeric,
        )
    }

    pub fn samples(&self) -> Vec<Sample> {
        (0..self.n).map(|k| self.sample(k)).collect()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset::from_samples(&self.task_id, self.samples()).expect("mock samples are valid")
    }

    /// Dataset file in the line-delimited question/answer format.
    pub fn to_jsonl(&self) -> String {
        self.samples()
            .iter()
            .map(|s| {
                serde_json::json!({"id": s.id, "question": s.input_text, "answer": s.gold_answer}).to_string() + "\n"
            })
            .collect()
    }

    fn sample_rules(&self) -> Vec<MockRule> {
        let mut rules = Vec::new();
        for k in 0..self.n {
            let needle = self.needle(k);
            let gold = Self::gold(k);
            let initial = if self.initial_fail.contains(&k) { gold + 1 } else { gold };
            let eval = if self.eval_fail.contains(&k) { gold + 1 } else { gold };
            let rule = |marker: &str, reply: String| {
                MockRule {
                    model: None,
                    contains: vec![marker.to_string(), needle.clone()],
                    replies: vec![reply],
                    repeat: true,
                }
            };
            rules.push(rule(
                "Solve the following problem. Reason step by step",
                format!(
                    "Step 1: The operands are {k} and {}.\nStep 2: Their sum is {initial}.\n<answer>{initial}</answer>",
                    k + 3
                ),
            ));
            rules.push(rule(
                "The reasoning below reached a wrong answer",
                format!(
                    "Step: Add the operands\nMistake: Case {k} was off by one when adding.\nPrevention: Recount the sum for operands like {k} before answering."
                ),
            ));
            rules.push(rule(
                "Below are the completed reasoning steps",
                format!("The sum is {eval}.\n<answer>{eval}</answer>"),
            ));
            rules.push(rule(
                "Solve the problem by following the guideline below",
                format!("Step 1: Read the operands.\nStep 2: Add them to get {eval}.\n<answer>{eval}</answer>"),
            ));
            rules.push(rule(
                "Let's think step by step. Give the final answer",
                format!("The sum is {eval}. <answer>{eval}</answer>"),
            ));
            // The problem follows the exemplars, so anchor on the text right before it.
            rules.push(MockRule {
                model: None,
                contains: vec![
                    "Here are some solved examples.".into(),
                    format!("tags.\n\n{needle}"),
                ],
                replies: vec![format!("The sum is {eval}. <answer>{eval}</answer>")],
                repeat: true,
            });
        }
        rules
    }
}

/// Guideline reply with exactly `t` steps; observed mistakes go to the last step.
pub fn aggregate_reply(t: usize) -> String {
    (1..=t)
        .map(|i| {
            let ids = if i == t { "R1, R2, R3, R4, R5, R6, R7, R8" } else { "none" };
            format!("Step {i}: Stage {i} of the sum\nExecution: Carry out stage {i} of adding the operands.\nReflections: {ids}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Mock script answering every stage for all `tasks`.
pub fn script(tasks: &[MockTask]) -> MockScript {
    let mut rules: Vec<MockRule> = tasks.iter().flat_map(MockTask::sample_rules).collect();
    let generic = |contains: &[&str], reply: String| MockRule {
        model: None,
        contains: contains.iter().map(|s| s.to_string()).collect(),
        replies: vec![reply],
        repeat: true,
    };
    rules.push(generic(
        &["The reasoning below solved the problem correctly"],
        "Step 1: Read the operands\nExecution: Identify the two numbers to add.\nStep 2: Add the operands\nExecution: Add them and report the sum.".into(),
    ));
    for t in 1..=12 {
        rules.push(generic(
            &["You are writing a step-by-step guideline", &format!("Use exactly {t} steps.")],
            aggregate_reply(t),
        ));
    }
    rules.push(generic(&["You are writing a step-by-step guideline"], aggregate_reply(5)));
    rules.push(generic(
        &["Before solving the problem below, write a step-by-step plan"],
        "Step 1: Read\nExecution: Find the operands.\nStep 2: Add\nExecution: Add them.\nStep 3: Check\nExecution: Verify the sum.".into(),
    ));
    for i in 1..=12 {
        rules.push(generic(
            &[&format!("Now carry out only step {i}:")],
            format!("Stage {i} done."),
        ));
    }
    rules.push(generic(
        &["Review one step of a solution against the known mistakes"],
        "Checked against the known mistakes; stage confirmed.".into(),
    ));
    MockScript {
        rules,
        default_reply: None,
    }
}

/// The ten-sample task with six correct and four incorrect initial solves.
pub fn six_four_task(task_id: &str) -> MockTask {
    MockTask::new(task_id, 10)
        .initial_fail([6, 7, 8, 9])
        .eval_fail([1, 4])
}
