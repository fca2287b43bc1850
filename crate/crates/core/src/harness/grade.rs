//! Answer extraction and grading.

use std::sync::{Arc, OnceLock};

use regex::Regex;

use crate::types::TaskKind;

/// Absolute tolerance for numeric answers.
pub const NUMERIC_TOLERANCE: f64 = 1e-9;

/// Content of the last `<answer>…</answer>` span, trimmed; empty if there is none.
pub fn extract_answer(text: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?is)<answer>(.*?)</answer>").unwrap());
    re.captures_iter(text)
        .last()
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default()
}

pub fn has_answer_tag(text: &str) -> bool {
    text.to_ascii_lowercase().contains("<answer>") && text.to_ascii_lowercase().contains("</answer>")
}

/// Grader for code answers, which require executing the prediction.
pub trait CodeGrader: Send + Sync {
    /// `None` means the pair could not be graded.
    fn grade(&self, predicted: &str, gold: &str) -> Option<bool>;
}

/// Grades predictions; code answers go to an optional plug-in.
#[derive(Clone, Default)]
pub struct Grader {
    code: Option<Arc<dyn CodeGrader>>,
}

impl Grader {
    pub fn with_code_grader(grader: Arc<dyn CodeGrader>) -> Self {
        Grader { code: Some(grader) }
    }

    pub fn grade(&self, predicted: &str, gold: &str, kind: TaskKind) -> bool {
        match kind {
            TaskKind::MultipleChoice => grade_choice(predicted, gold),
            TaskKind::Numeric => grade_numeric(predicted, gold),
            TaskKind::FreeText => predicted.trim().to_lowercase() == gold.trim().to_lowercase(),
            TaskKind::Code => match self.code.as_ref().and_then(|g| g.grade(predicted, gold)) {
                Some(ok) => ok,
                None => {
                    tracing::warn!("code answer is ungradable without a code grader; counted as incorrect");
                    false
                }
            },
        }
    }
}

/// Grades with the default rules (no code grader).
pub fn grade(predicted: &str, gold: &str, kind: TaskKind) -> bool {
    Grader::default().grade(predicted, gold, kind)
}

fn option_letter(s: &str) -> Option<char> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\(?([A-Za-z])\)?(?:$|[\s.:,)])").unwrap());
    re.captures(s.trim())
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

fn grade_choice(predicted: &str, gold: &str) -> bool {
    match (option_letter(predicted), option_letter(gold)) {
        (Some(p), Some(g)) => p == g,
        _ => {
            let norm = |s: &str| s.trim().trim_start_matches('(').trim_end_matches(')').trim().to_lowercase();
            !predicted.trim().is_empty() && norm(predicted) == norm(gold)
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',' && *c != '$')
        .collect();
    if cleaned.is_empty() {
        return None;
    }
    if let Some((num, den)) = cleaned.split_once('/') {
        let n: f64 = num.parse().ok()?;
        let d: f64 = den.parse().ok()?;
        if d == 0.0 {
            return None;
        }
        return Some(n / d);
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn grade_numeric(predicted: &str, gold: &str) -> bool {
    match (parse_number(predicted), parse_number(gold)) {
        (Some(p), Some(g)) => (p - g).abs() <= NUMERIC_TOLERANCE,
        _ => false,
    }
}
