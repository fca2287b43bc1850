//! Guided step-by-step solving with per-step refinement.

use serde::{Deserialize, Serialize};

use crate::guideline::{validate_guideline, Guideline, GuidelineStep};
use crate::harness::grade::{extract_answer, has_answer_tag};
use crate::pipeline::{CallError, Pipeline};
use crate::template::TemplateName;
use crate::types::{Sample, StepRecord, Trajectory};

/// Reply that ends refinement without changing the step.
pub const NO_CHANGE: &str = "NO_CHANGE";
pub const DEFAULT_REFINE_CAP: u32 = 3;

/// Stages whose templates shape a guided run.
pub const EXECUTION_TEMPLATES: [TemplateName; 4] = [
    TemplateName::ExecuteStep,
    TemplateName::ExecuteWhole,
    TemplateName::RefineStep,
    TemplateName::Finalize,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionConfig {
    pub executor_model: String,
    pub refiner_model: String,
    pub refine_rounds: u32,
    pub stepwise: bool,
    pub max_step_chars: usize,
}

impl ExecutionConfig {
    pub fn new(executor: impl Into<String>, refiner: impl Into<String>) -> Self {
        ExecutionConfig {
            executor_model: executor.into(),
            refiner_model: refiner.into(),
            refine_rounds: 1,
            stepwise: true,
            max_step_chars: 8000,
        }
    }

    pub fn with_rounds(mut self, rounds: u32) -> Self {
        self.refine_rounds = rounds;
        self
    }

    pub fn with_stepwise(mut self, stepwise: bool) -> Self {
        self.stepwise = stepwise;
        self
    }

    pub fn check(&self, cap: u32) -> Result<(), ExecutionError> {
        if self.refine_rounds > cap {
            return Err(ExecutionError::Config(format!(
                "refine_rounds {} exceeds the cap of {cap}",
                self.refine_rounds
            )));
        }
        if self.max_step_chars == 0 {
            return Err(ExecutionError::Config("max_step_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutionError {
    #[error("invalid execution config: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{source} (after {} completed steps)", partial.steps.len())]
    Interrupted {
        #[source]
        source: CallError,
        partial: Box<Trajectory>,
    },
    #[error(transparent)]
    Call(#[from] CallError),
}

impl ExecutionError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            ExecutionError::Interrupted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => s[..i].to_string(),
        None => s.to_string(),
    }
}

fn render_prefix(prefix: &[StepRecord]) -> String {
    if prefix.is_empty() {
        return "(none yet)".to_string();
    }
    prefix
        .iter()
        .map(|s| format!("Step {}: {}", s.index, s.refined_content))
        .collect::<Vec<_>>()
        .join("\n")
}

fn bullet_list(items: &[String]) -> String {
    if items.is_empty() {
        return "none".to_string();
    }
    items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
}

/// Produces the raw text of step `g_t` given the refined prior steps.
pub fn execute_step(
    p: &Pipeline,
    x: &Sample,
    prefix: &[StepRecord],
    g_t: &GuidelineStep,
    cfg: &ExecutionConfig,
) -> Result<String, CallError> {
    let index = g_t.index.to_string();
    let reply = p.call(
        &cfg.executor_model,
        TemplateName::ExecuteStep,
        &[
            ("input", &x.input_text),
            ("prior_steps", &render_prefix(prefix)),
            ("step_index", &index),
            ("step_title", &g_t.title),
            ("step_instruction", &g_t.execution),
        ],
    )?;
    Ok(truncate_chars(reply.trim(), cfg.max_step_chars))
}

/// Applies up to `refine_rounds` refinement calls; returns the final text and
/// the number of calls made.
pub fn refine_step(
    p: &Pipeline,
    x: &Sample,
    r_t: &str,
    g_t: &GuidelineStep,
    cfg: &ExecutionConfig,
) -> Result<(String, u32), CallError> {
    let mistakes = bullet_list(&g_t.mistakes);
    let preventions = bullet_list(&g_t.preventions);
    let mut text = r_t.to_string();
    let mut rounds = 0;
    while rounds < cfg.refine_rounds {
        let reply = p.call(
            &cfg.refiner_model,
            TemplateName::RefineStep,
            &[
                ("input", &x.input_text),
                ("step_title", &g_t.title),
                ("step_text", &text),
                ("mistakes", &mistakes),
                ("preventions", &preventions),
            ],
        )?;
        rounds += 1;
        let reply = reply.trim();
        if reply.lines().next().map(str::trim) == Some(NO_CHANGE) {
            break;
        }
        if !reply.is_empty() {
            text = truncate_chars(reply, cfg.max_step_chars);
        }
    }
    Ok((text, rounds))
}

/// Final answer for a completed trajectory. Returns the answer and whether a
/// provider call was made.
pub fn finalize(p: &Pipeline, x: &Sample, r: &Trajectory, cfg: &ExecutionConfig) -> Result<(String, bool), CallError> {
    if let Some(last) = r.steps.last() {
        if has_answer_tag(&last.refined_content) {
            let answer = extract_answer(&last.refined_content);
            if !answer.is_empty() {
                return Ok((answer, false));
            }
        }
    }
    let reply = p.call(
        &cfg.executor_model,
        TemplateName::Finalize,
        &[("input", &x.input_text), ("steps", &render_prefix(&r.steps))],
    )?;
    let answer = extract_answer(&reply);
    if !answer.is_empty() {
        return Ok((answer, true));
    }
    let fallback = r
        .steps
        .iter()
        .rev()
        .map(|s| extract_answer(&s.refined_content))
        .find(|a| !a.is_empty())
        .unwrap_or_default();
    Ok((fallback, true))
}

fn interrupted(source: CallError, partial: Trajectory) -> ExecutionError {
    ExecutionError::Interrupted {
        source,
        partial: Box::new(partial),
    }
}

/// Solves `x` by following `g` step by step, refining each step before the
/// next one sees it.
pub fn guided_solve(p: &Pipeline, x: &Sample, g: &Guideline, cfg: &ExecutionConfig) -> Result<Trajectory, ExecutionError> {
    let violations = validate_guideline(g);
    if !violations.is_empty() {
        let list = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(ExecutionError::Precondition(format!("invalid guideline: {list}")));
    }
    if x.input_text.trim().is_empty() {
        return Err(ExecutionError::Precondition(format!("sample `{}` has empty input", x.id)));
    }
    if cfg.max_step_chars == 0 {
        return Err(ExecutionError::Config("max_step_chars must be positive".into()));
    }

    let mut traj = Trajectory {
        sample_id: x.id.clone(),
        steps: Vec::new(),
        final_answer: String::new(),
        executor_model: cfg.executor_model.clone(),
        refiner_model: cfg.refiner_model.clone(),
        warnings: Vec::new(),
    };

    if cfg.stepwise {
        for g_t in &g.steps {
            let raw = match execute_step(p, x, &traj.steps, g_t, cfg) {
                Ok(r) => r,
                Err(e) => return Err(interrupted(e, traj)),
            };
            if raw.is_empty() {
                traj.warnings.push(format!("step {}: empty execution reply", g_t.index));
            }
            let (refined, rounds) = match refine_step(p, x, &raw, g_t, cfg) {
                Ok(r) => r,
                Err(e) => return Err(interrupted(e, traj)),
            };
            traj.steps.push(StepRecord::refined(g_t.index, raw, refined, rounds));
        }
    } else {
        let reply = match p.call(
            &cfg.executor_model,
            TemplateName::ExecuteWhole,
            &[("input", &x.input_text), ("guideline", &g.to_prompt_text())],
        ) {
            Ok(r) => truncate_chars(r.trim(), cfg.max_step_chars),
            Err(e) => return Err(interrupted(e, traj)),
        };
        if reply.is_empty() {
            traj.warnings.push("step 1: empty execution reply".into());
        }
        let whole = GuidelineStep {
            index: 1,
            title: format!("Solve the task \"{}\" following the guideline", g.task_id),
            execution: g.to_prompt_text(),
            mistakes: g.steps.iter().flat_map(|s| s.mistakes.iter().cloned()).collect(),
            preventions: g.steps.iter().flat_map(|s| s.preventions.iter().cloned()).collect(),
        };
        let (refined, rounds) = match refine_step(p, x, &reply, &whole, cfg) {
            Ok(r) => r,
            Err(e) => return Err(interrupted(e, traj)),
        };
        traj.steps.push(StepRecord::refined(1, reply, refined, rounds));
    }

    match finalize(p, x, &traj, cfg) {
        Ok((answer, _)) => traj.final_answer = answer,
        Err(e) => return Err(interrupted(e, traj)),
    }
    if traj.final_answer.is_empty() {
        traj.warnings.push("no <answer> tag found".into());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guideline::Provenance;
    use crate::harness::grade::Grader;
    use crate::provider::{MockProvider, MockRule, ProviderError};
    use crate::template::TemplateSet;
    use crate::types::TaskKind;

    fn guideline(n: usize) -> Guideline {
        Guideline {
            task_id: "T".into(),
            provenance: Provenance::now("mock", "d", "v"),
            steps: (1..=n)
                .map(|i| {
                    let mut s = GuidelineStep::new(i, format!("Title{i}"), format!("Instr{i}"));
                    s.mistakes.push(format!("mistake{i}"));
                    s.preventions.push(format!("prevent{i}"));
                    s
                })
                .collect(),
        }
    }

    fn sample() -> Sample {
        Sample::new("s1", "T", "what is it?", "7", TaskKind::Numeric)
    }

    fn with<T>(mock: &MockProvider, f: impl FnOnce(&Pipeline) -> T) -> T {
        let templates = TemplateSet::builtin();
        let grader = Grader::default();
        f(&Pipeline::new(mock, &templates, &grader))
    }

    /// Execute replies "raw<i>", refinements "refined: <input>", finalize "<answer>7</answer>".
    fn scripted() -> MockProvider {
        MockProvider::new()
            .rule(MockRule::new(&["Below are the completed reasoning steps"], &["<answer>7</answer>"]).repeating())
            .with_responder(|req| {
                let t = req.last_user_content();
                if let Some(pos) = t.find("Now carry out only step ") {
                    let rest = &t[pos + "Now carry out only step ".len()..];
                    let n: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
                    return Some(Ok(format!("raw{n}")));
                }
                if let Some(pos) = t.find("Step result:\n") {
                    let body = t[pos + 13..].lines().next().unwrap_or("").to_string();
                    return Some(Ok(format!("refined {body}")));
                }
                None
            })
    }

    #[test]
    fn first_step_passthrough() {
        let mock = MockProvider::echo("the first step text");
        let out = with(&mock, |p| {
            execute_step(p, &sample(), &[], &guideline(1).steps[0], &ExecutionConfig::new("e", "r"))
        })
        .unwrap();
        assert_eq!(out, "the first step text");
    }

    #[test]
    fn step_text_is_truncated() {
        let mock = MockProvider::echo("abcdefghij");
        let mut cfg = ExecutionConfig::new("e", "r");
        cfg.max_step_chars = 4;
        let out = with(&mock, |p| execute_step(p, &sample(), &[], &guideline(1).steps[0], &cfg)).unwrap();
        assert_eq!(out, "abcd");
    }

    #[test]
    fn refine_zero_rounds_is_identity() {
        let mock = MockProvider::echo("changed");
        let cfg = ExecutionConfig::new("e", "r").with_rounds(0);
        let out = with(&mock, |p| refine_step(p, &sample(), "orig", &guideline(1).steps[0], &cfg)).unwrap();
        assert_eq!(out, ("orig".to_string(), 0));
        assert_eq!(mock.call_count(), 0);
    }

    #[test]
    fn refine_sentinel_stops_early() {
        let mock = MockProvider::echo("NO_CHANGE");
        let cfg = ExecutionConfig::new("e", "r").with_rounds(2);
        let out = with(&mock, |p| refine_step(p, &sample(), "orig", &guideline(1).steps[0], &cfg)).unwrap();
        assert_eq!(out, ("orig".to_string(), 1));
    }

    #[test]
    fn refine_empty_reply_keeps_text() {
        let mock = MockProvider::echo("   ");
        let cfg = ExecutionConfig::new("e", "r").with_rounds(2);
        let out = with(&mock, |p| refine_step(p, &sample(), "orig", &guideline(1).steps[0], &cfg)).unwrap();
        assert_eq!(out, ("orig".to_string(), 2));
    }

    fn traj(steps: &[&str]) -> Trajectory {
        Trajectory {
            sample_id: "s1".into(),
            steps: steps.iter().enumerate().map(|(i, s)| StepRecord::unrefined(i + 1, *s)).collect(),
            final_answer: String::new(),
            executor_model: "e".into(),
            refiner_model: "r".into(),
            warnings: vec![],
        }
    }

    #[test]
    fn finalize_uses_tag_on_last_step_without_call() {
        let mock = MockProvider::echo("<answer>other</answer>");
        let cfg = ExecutionConfig::new("e", "r");
        let out = with(&mock, |p| finalize(p, &sample(), &traj(&["a", "so <answer>(J)</answer>"]), &cfg)).unwrap();
        assert_eq!(out, ("(J)".to_string(), false));
        assert_eq!(mock.call_count(), 0);
    }

    #[test]
    fn finalize_call_wins_over_earlier_tag() {
        let mock = MockProvider::echo("<answer>7</answer>");
        let cfg = ExecutionConfig::new("e", "r");
        let t = traj(&["a", "b", "<answer>3</answer>", "d"]);
        let out = with(&mock, |p| finalize(p, &sample(), &t, &cfg)).unwrap();
        assert_eq!(out.0, "7");
        let mock = MockProvider::echo("no tag");
        let out = with(&mock, |p| finalize(p, &sample(), &t, &cfg)).unwrap();
        assert_eq!(out.0, "3");
        let out = with(&mock, |p| finalize(p, &sample(), &traj(&["a"]), &cfg)).unwrap();
        assert_eq!(out.0, "");
    }

    #[test]
    fn call_count_law() {
        for (rounds, expected) in [(0u32, 6usize), (1, 11), (2, 16)] {
            let mock = scripted();
            let cfg = ExecutionConfig::new("e", "r").with_rounds(rounds);
            let t = with(&mock, |p| guided_solve(p, &sample(), &guideline(5), &cfg)).unwrap();
            assert_eq!(mock.call_count(), expected, "rounds={rounds}");
            assert_eq!(t.steps.len(), 5);
            assert!(t.steps.iter().all(|s| s.rounds_applied == rounds));
            assert_eq!(t.final_answer, "7");
        }
    }

    #[test]
    fn prefix_monotonicity_and_routing() {
        let mock = scripted();
        let cfg = ExecutionConfig::new("exec", "ref").with_rounds(1);
        with(&mock, |p| guided_solve(p, &sample(), &guideline(3), &cfg)).unwrap();
        let calls = mock.calls();
        let executes: Vec<_> = calls
            .iter()
            .filter(|c| c.last_user_content().contains("Now carry out only step"))
            .collect();
        assert_eq!(executes.len(), 3);
        for (t, call) in executes.iter().enumerate() {
            let text = call.last_user_content();
            for prior in 1..=t {
                assert!(text.contains(&format!("refined raw{prior}")), "step {} missing prefix {prior}", t + 1);
            }
            for later in t + 1..=3 {
                assert!(!text.contains(&format!("raw{later}")));
            }
            assert_eq!(call.model, "exec");
        }
        for c in calls.iter().filter(|c| c.last_user_content().contains("Review one step")) {
            assert_eq!(c.model, "ref");
        }
    }

    #[test]
    fn whole_guideline_mode_makes_one_execute_call() {
        let mock = MockProvider::new()
            .rule(MockRule::new(&["Solve the problem by following the guideline"], &["all steps <answer>7</answer>"]));
        let cfg = ExecutionConfig::new("e", "r").with_rounds(0).with_stepwise(false);
        let t = with(&mock, |p| guided_solve(p, &sample(), &guideline(5), &cfg)).unwrap();
        assert_eq!(mock.call_count(), 1);
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.final_answer, "7");
    }

    #[test]
    fn empty_input_rejected_before_calls() {
        let mock = scripted();
        let mut x = sample();
        x.input_text = "  ".into();
        let err = with(&mock, |p| guided_solve(p, &x, &guideline(2), &ExecutionConfig::new("e", "r"))).unwrap_err();
        assert!(matches!(err, ExecutionError::Precondition(_)));
        assert_eq!(mock.call_count(), 0);
    }

    #[test]
    fn mid_trajectory_failure_carries_partial() {
        let mock = MockProvider::new().with_responder(|req| {
            let t = req.last_user_content();
            if t.contains("Now carry out only step 3") {
                Some(Err(ProviderError::Transport("boom".into())))
            } else if t.contains("Now carry out") {
                Some(Ok("ok".into()))
            } else {
                Some(Ok("NO_CHANGE".into()))
            }
        });
        let err = with(&mock, |p| guided_solve(p, &sample(), &guideline(5), &ExecutionConfig::new("e", "r"))).unwrap_err();
        assert_eq!(err.partial().unwrap().steps.len(), 2);
    }

    #[test]
    fn rounds_zero_matches_refine_disabled() {
        let run = |cfg: ExecutionConfig| {
            let mock = scripted();
            with(&mock, |p| guided_solve(p, &sample(), &guideline(3), &cfg)).unwrap()
        };
        let a = run(ExecutionConfig::new("e", "r").with_rounds(0));
        let b = run(ExecutionConfig::new("e", "r").with_rounds(0));
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(a.steps.iter().all(|s| s.raw_content == s.refined_content));
    }
}
