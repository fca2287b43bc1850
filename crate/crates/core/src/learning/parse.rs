//! Parsers for model replies: enumerated reasoning steps, guideline-shaped
//! step lists and mistake/prevention reflections.

use std::sync::OnceLock;

use regex::Regex;

use crate::types::Reflection;

/// Splits a reply on `Step N:` markers numbered 1, 2, 3, … in order.
/// Returns the full trimmed text as a single step when there are no markers.
pub fn split_steps(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\bstep\s+(\d+)\s*[:.)]").unwrap());

    let mut marks: Vec<(usize, usize)> = Vec::new();
    let mut expected = 1usize;
    for c in re.captures_iter(text) {
        let n: usize = c[1].parse().unwrap_or(0);
        if n == expected {
            let m = c.get(0).unwrap();
            marks.push((m.start(), m.end()));
            expected += 1;
        }
    }
    if marks.is_empty() {
        return vec![text.trim().to_string()];
    }
    marks
        .iter()
        .enumerate()
        .map(|(i, &(_, body_start))| {
            let end = marks.get(i + 1).map(|m| m.0).unwrap_or(text.len());
            text[body_start..end].trim().to_string()
        })
        .collect()
}

/// One step of a guideline-shaped reply.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedStep {
    pub title: String,
    pub execution: String,
    pub mistakes: Vec<String>,
    pub preventions: Vec<String>,
    /// 1-based ids of observed mistakes the model assigned to this step.
    pub reflection_ids: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Execution,
    Mistake,
    Prevention,
    Reflections,
    StepHint,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\s#>*_-]*step\s+(\d+)\s*[*_]*\s*[:.)\-–]\s*(.*)$").unwrap())
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s>*_-]*(execution|instruction|mistakes?|preventions?|reflections?|step)[*_]*\s*:[*_]*\s*(.*)$")
            .unwrap()
    })
}

fn bullet(line: &str) -> Option<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+(.*)$").unwrap());
    re.captures(line).map(|c| c.get(1).unwrap().as_str())
}

fn clean_title(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '*' || c == '_' || c == '#')
        .trim()
        .trim_end_matches(':')
        .trim()
        .to_string()
}

fn reflection_ids(s: &str) -> Vec<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\bR(\d+)\b").unwrap());
    re.captures_iter(s).filter_map(|c| c[1].parse().ok()).collect()
}

fn append(buf: &mut String, text: &str) {
    let text = text.trim();
    if text.is_empty() {
        return;
    }
    if !buf.is_empty() {
        buf.push(' ');
    }
    buf.push_str(text);
}

fn push_item(list: &mut Vec<String>, text: &str, new_item: bool) {
    let text = text.trim();
    if text.is_empty() {
        return;
    }
    match list.last_mut() {
        Some(last) if !new_item => append(last, text),
        _ => list.push(text.to_string()),
    }
}

/// Parses `Step N: title` blocks with `Execution:`, `Mistake:`, `Prevention:`
/// and `Reflections:` labels. Unlabelled lines continue the current field;
/// bullets under a mistake or prevention label start new items.
pub fn parse_guideline_steps(text: &str) -> Vec<ParsedStep> {
    let mut steps: Vec<ParsedStep> = Vec::new();
    let mut field = Field::Execution;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(c) = header_re().captures(line) {
            steps.push(ParsedStep {
                title: clean_title(&c[2]),
                ..ParsedStep::default()
            });
            field = Field::Execution;
            continue;
        }
        let Some(step) = steps.last_mut() else {
            continue;
        };
        if let Some(c) = label_re().captures(line) {
            let rest = c.get(2).unwrap().as_str();
            let label = c[1].to_ascii_lowercase();
            field = if label.starts_with("mistake") {
                Field::Mistake
            } else if label.starts_with("prevention") {
                Field::Prevention
            } else if label.starts_with("reflection") {
                Field::Reflections
            } else if label == "step" {
                Field::StepHint
            } else {
                Field::Execution
            };
            match field {
                Field::Execution => append(&mut step.execution, rest),
                Field::Mistake => push_item(&mut step.mistakes, rest, true),
                Field::Prevention => push_item(&mut step.preventions, rest, true),
                Field::Reflections => step.reflection_ids.extend(reflection_ids(rest)),
                Field::StepHint => {}
            }
            continue;
        }
        let item = bullet(line);
        match field {
            Field::Execution => append(&mut step.execution, line),
            Field::Mistake => push_item(&mut step.mistakes, item.unwrap_or(line), item.is_some()),
            Field::Prevention => push_item(&mut step.preventions, item.unwrap_or(line), item.is_some()),
            Field::Reflections => step.reflection_ids.extend(reflection_ids(line)),
            Field::StepHint => {}
        }
    }
    for s in &mut steps {
        if s.execution.is_empty() {
            s.execution = s.title.clone();
        }
    }
    steps
}

/// Parses `Mistake:` / `Prevention:` pairs, each optionally preceded by a
/// `Step:` line naming where it happened. Mistakes without a prevention are dropped.
pub fn parse_reflections(text: &str) -> Vec<Reflection> {
    let mut out = Vec::new();
    let mut hint: Option<String> = None;
    let mut pending: Option<Reflection> = None;
    let mut field = Field::StepHint;

    let flush = |pending: &mut Option<Reflection>, out: &mut Vec<Reflection>| {
        if let Some(r) = pending.take() {
            if r.prevention.trim().is_empty() {
                tracing::debug!(mistake = %r.mistake, "dropping reflection without prevention");
            } else {
                out.push(r);
            }
        }
    };

    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(c) = header_re().captures(line) {
            flush(&mut pending, &mut out);
            hint = Some(clean_title(&c[2])).filter(|t| !t.is_empty());
            field = Field::StepHint;
            continue;
        }
        if let Some(c) = label_re().captures(line) {
            let rest = c.get(2).unwrap().as_str().trim();
            let label = c[1].to_ascii_lowercase();
            if label == "step" {
                flush(&mut pending, &mut out);
                hint = Some(clean_title(rest)).filter(|t| !t.is_empty());
                field = Field::StepHint;
            } else if label.starts_with("mistake") {
                flush(&mut pending, &mut out);
                pending = Some(Reflection {
                    mistake: rest.to_string(),
                    prevention: String::new(),
                    step_hint: hint.clone(),
                });
                field = Field::Mistake;
            } else if label.starts_with("prevention") {
                match pending.as_mut() {
                    Some(p) if p.prevention.is_empty() => p.prevention = rest.to_string(),
                    _ => {
                        flush(&mut pending, &mut out);
                        pending = Some(Reflection {
                            mistake: String::new(),
                            prevention: rest.to_string(),
                            step_hint: hint.clone(),
                        });
                    }
                }
                field = Field::Prevention;
            }
            continue;
        }
        if let Some(p) = pending.as_mut() {
            let text = bullet(line).unwrap_or(line);
            match field {
                Field::Mistake => append(&mut p.mistake, text),
                Field::Prevention => append(&mut p.prevention, text),
                _ => {}
            }
        }
    }
    flush(&mut pending, &mut out);
    out
}
