//! Versioned prompt templates with named `{slot}` placeholders.
//!
//! Template files live at `<dir>/<name>@<version>.txt`. `{{` and `}}` render
//! as literal braces; any other `{` that does not open a `{slot}` is literal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    InitialSolve,
    Extract,
    Reflect,
    Aggregate,
    ExecuteStep,
    ExecuteWhole,
    RefineStep,
    Finalize,
    Cot,
    FewShotCot,
    SelfPlan,
}

impl TemplateName {
    pub const ALL: [TemplateName; 11] = [
        TemplateName::InitialSolve,
        TemplateName::Extract,
        TemplateName::Reflect,
        TemplateName::Aggregate,
        TemplateName::ExecuteStep,
        TemplateName::ExecuteWhole,
        TemplateName::RefineStep,
        TemplateName::Finalize,
        TemplateName::Cot,
        TemplateName::FewShotCot,
        TemplateName::SelfPlan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::InitialSolve => "initial_solve",
            TemplateName::Extract => "extract",
            TemplateName::Reflect => "reflect",
            TemplateName::Aggregate => "aggregate",
            TemplateName::ExecuteStep => "execute_step",
            TemplateName::ExecuteWhole => "execute_whole",
            TemplateName::RefineStep => "refine_step",
            TemplateName::Finalize => "finalize",
            TemplateName::Cot => "cot",
            TemplateName::FewShotCot => "few_shot_cot",
            TemplateName::SelfPlan => "self_plan",
        }
    }

    /// Slots a template for this stage must contain, and the only ones it may.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateName::InitialSolve => &["input"],
            TemplateName::Extract | TemplateName::Reflect => &["input", "trajectory", "gold"],
            TemplateName::Aggregate => &["task_id", "records", "reflections", "step_constraint"],
            TemplateName::ExecuteStep => &[
                "input",
                "prior_steps",
                "step_index",
                "step_title",
                "step_instruction",
            ],
            TemplateName::ExecuteWhole => &["input", "guideline"],
            TemplateName::RefineStep => &["input", "step_title", "step_text", "mistakes", "preventions"],
            TemplateName::Finalize => &["input", "steps"],
            TemplateName::Cot => &["input"],
            TemplateName::FewShotCot => &["input", "exemplars"],
            TemplateName::SelfPlan => &["input", "step_constraint"],
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::InitialSolve => include_str!("../templates/initial_solve@v1.txt"),
            TemplateName::Extract => include_str!("../templates/extract@v1.txt"),
            TemplateName::Reflect => include_str!("../templates/reflect@v1.txt"),
            TemplateName::Aggregate => include_str!("../templates/aggregate@v1.txt"),
            TemplateName::ExecuteStep => include_str!("../templates/execute_step@v1.txt"),
            TemplateName::ExecuteWhole => include_str!("../templates/execute_whole@v1.txt"),
            TemplateName::RefineStep => include_str!("../templates/refine_step@v1.txt"),
            TemplateName::Finalize => include_str!("../templates/finalize@v1.txt"),
            TemplateName::Cot => include_str!("../templates/cot@v1.txt"),
            TemplateName::FewShotCot => include_str!("../templates/few_shot_cot@v1.txt"),
            TemplateName::SelfPlan => include_str!("../templates/self_plan@v1.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownName(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown template name `{0}`")]
    UnknownName(String),
    #[error("template {name}@{version}: missing required slot {{{slot}}}")]
    MissingSlot {
        name: TemplateName,
        version: String,
        slot: String,
    },
    #[error("template {name}@{version}: unknown slot {{{slot}}}")]
    UnknownSlot {
        name: TemplateName,
        version: String,
        slot: String,
    },
    #[error("template {name}@{version}: no value bound for slot {{{slot}}}")]
    Unbound {
        name: TemplateName,
        version: String,
        slot: String,
    },
    #[error("template file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut text = String::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < body.len() {
        let c = bytes[i];
        if c == b'{' {
            if bytes.get(i + 1) == Some(&b'{') {
                text.push('{');
                i += 2;
                continue;
            }
            let rest = &body[i + 1..];
            let ident_len = rest
                .bytes()
                .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
                .count();
            if ident_len > 0 && rest.as_bytes().get(ident_len) == Some(&b'}') {
                if !text.is_empty() {
                    out.push(Segment::Text(std::mem::take(&mut text)));
                }
                out.push(Segment::Slot(rest[..ident_len].to_string()));
                i += ident_len + 2;
                continue;
            }
        } else if c == b'}' && bytes.get(i + 1) == Some(&b'}') {
            text.push('}');
            i += 2;
            continue;
        }
        let ch = body[i..].chars().next().expect("in bounds");
        text.push(ch);
        i += ch.len_utf8();
    }
    if !text.is_empty() {
        out.push(Segment::Text(text));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub version: String,
    pub body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parses `body` and checks it uses exactly the slots its stage defines.
    pub fn new(name: TemplateName, version: impl Into<String>, body: impl Into<String>) -> Result<Self, TemplateError> {
        let version = version.into();
        let body = body.into();
        let segments = parse_segments(&body);
        let used: BTreeSet<&str> = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Text(_) => None,
            })
            .collect();
        let required: BTreeSet<&str> = name.slots().iter().copied().collect();
        if let Some(slot) = required.difference(&used).next() {
            return Err(TemplateError::MissingSlot {
                name,
                version,
                slot: slot.to_string(),
            });
        }
        if let Some(slot) = used.difference(&required).next() {
            return Err(TemplateError::UnknownSlot {
                name,
                version,
                slot: slot.to_string(),
            });
        }
        Ok(PromptTemplate {
            name,
            version,
            body,
            segments,
        })
    }

    /// Substitutes every slot in one pass; bound values are never re-scanned.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(slot) => {
                    let v = values
                        .iter()
                        .find(|(k, _)| k == slot)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Unbound {
                            name: self.name,
                            version: self.version.clone(),
                            slot: slot.clone(),
                        })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }

    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }
}

/// Orders versions like `v2` < `v10`: digit runs compare numerically.
fn version_order(a: &str, b: &str) -> std::cmp::Ordering {
    fn key(s: &str) -> Vec<(u64, String)> {
        let mut out = Vec::new();
        let mut num = String::new();
        let mut txt = String::new();
        for c in s.chars() {
            if c.is_ascii_digit() {
                if !txt.is_empty() {
                    out.push((0, std::mem::take(&mut txt)));
                }
                num.push(c);
            } else {
                if !num.is_empty() {
                    out.push((num.parse().unwrap_or(u64::MAX), String::new()));
                    num.clear();
                }
                txt.push(c);
            }
        }
        if !num.is_empty() {
            out.push((num.parse().unwrap_or(u64::MAX), String::new()));
        }
        if !txt.is_empty() {
            out.push((0, txt));
        }
        out
    }
    key(a).cmp(&key(b))
}

/// One template per stage.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    /// The default templates compiled into the crate (all `v1`).
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| {
                let t = PromptTemplate::new(n, "v1", n.builtin_body()).expect("builtin template is valid");
                (n, t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Builtins overlaid with `<dir>/<name>@<version>.txt` files. When a stage
    /// has several versions on disk the pinned one is used if given, otherwise
    /// the highest.
    pub fn from_dir(dir: &Path, pins: &BTreeMap<String, String>) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::builtin();
        let entries = std::fs::read_dir(dir).map_err(|e| TemplateError::File {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let mut found: BTreeMap<TemplateName, Vec<(String, std::path::PathBuf)>> = BTreeMap::new();
        for entry in entries {
            let path = entry
                .map_err(|e| TemplateError::File {
                    path: dir.display().to_string(),
                    message: e.to_string(),
                })?
                .path();
            let Some(stem) = path
                .file_name()
                .and_then(|f| f.to_str())
                .and_then(|f| f.strip_suffix(".txt"))
            else {
                continue;
            };
            let Some((name, version)) = stem.split_once('@') else {
                continue;
            };
            let name: TemplateName = name.parse()?;
            found.entry(name).or_default().push((version.to_string(), path));
        }
        for (name, mut versions) in found {
            versions.sort_by(|a, b| version_order(&a.0, &b.0));
            let chosen = match pins.get(name.as_str()) {
                Some(pin) => versions.iter().find(|(v, _)| v == pin).ok_or_else(|| TemplateError::File {
                    path: dir.display().to_string(),
                    message: format!("pinned version {name}@{pin} not found"),
                })?,
                None => versions.last().expect("nonempty"),
            };
            let body = std::fs::read_to_string(&chosen.1).map_err(|e| TemplateError::File {
                path: chosen.1.display().to_string(),
                message: e.to_string(),
            })?;
            set.templates.insert(name, PromptTemplate::new(name, chosen.0.clone(), body)?);
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.name, template);
    }

    pub fn render(&self, name: TemplateName, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.get(name).render(values)
    }

    /// `name@version` identifiers of the given stages, comma-joined in stage order.
    pub fn versions_of(&self, names: &[TemplateName]) -> String {
        let mut names = names.to_vec();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .map(|n| self.get(n).id())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn version_summary(&self) -> String {
        self.versions_of(&TemplateName::ALL)
    }
}
