use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, Provider, ProviderError, Usage};

/// One scripted reply rule. A rule matches when `model` (if set) equals the
/// request model and every `contains` needle occurs in the request transcript.
/// Each match consumes the next reply; once exhausted the rule stops matching
/// unless `repeat` is set, in which case the last reply is served forever.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub replies: Vec<String>,
    #[serde(default)]
    pub repeat: bool,
}

impl MockRule {
    pub fn new(contains: &[&str], replies: &[&str]) -> Self {
        MockRule {
            model: None,
            contains: contains.iter().map(|s| s.to_string()).collect(),
            replies: replies.iter().map(|s| s.to_string()).collect(),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn for_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    fn matches(&self, req: &ChatRequest, transcript: &str) -> bool {
        self.model.as_deref().is_none_or(|m| m == req.model)
            && self.contains.iter().all(|n| transcript.contains(n.as_str()))
    }
}

/// Script file for the mock provider.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Served when no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_reply: Option<String>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ProviderError::Config(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| ProviderError::Config(format!("mock script {}: {e}", path.display())))
    }
}

type Responder = Box<dyn Fn(&ChatRequest) -> Option<Result<String, ProviderError>> + Send + Sync>;

/// Deterministic scripted provider with a call log.
///
/// Replies are chosen by content, not arrival order, so concurrent callers see
/// the same answers as sequential ones (except for consuming rules).
pub struct MockProvider {
    rules: Vec<MockRule>,
    used: Mutex<Vec<usize>>,
    responder: Option<Responder>,
    default_reply: Option<String>,
    log: Mutex<Vec<ChatRequest>>,
}

impl Default for MockProvider {
    fn default() -> Self {
        MockProvider::new()
    }
}

impl MockProvider {
    pub fn new() -> Self {
        MockProvider {
            rules: Vec::new(),
            used: Mutex::new(Vec::new()),
            responder: None,
            default_reply: None,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Answers `reply` to every request.
    pub fn echo(reply: impl Into<String>) -> Self {
        let mut m = MockProvider::new();
        m.default_reply = Some(reply.into());
        m
    }

    pub fn from_script(script: MockScript) -> Self {
        let mut m = MockProvider::new();
        m.default_reply = script.default_reply;
        for r in script.rules {
            m = m.rule(r);
        }
        m
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self.used.get_mut().unwrap().push(0);
        self
    }

    /// Programmatic fallback consulted after the rules.
    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<Result<String, ProviderError>> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn calls(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    fn reply_for(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let transcript = req.transcript();
        {
            let mut used = self.used.lock().unwrap();
            for (i, rule) in self.rules.iter().enumerate() {
                if !rule.matches(req, &transcript) || rule.replies.is_empty() {
                    continue;
                }
                let n = used[i];
                if n < rule.replies.len() {
                    used[i] += 1;
                    return Ok(rule.replies[n].clone());
                }
                if rule.repeat {
                    return Ok(rule.replies[rule.replies.len() - 1].clone());
                }
            }
        }
        if let Some(f) = &self.responder {
            if let Some(r) = f(req) {
                return r;
            }
        }
        self.default_reply
            .clone()
            .ok_or_else(|| ProviderError::exhausted(req))
    }
}

impl Provider for MockProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.validate()?;
        self.log.lock().unwrap().push(req.clone());
        let content = self.reply_for(req)?;
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: req.transcript().split_whitespace().count() as u64,
                completion_tokens: content.split_whitespace().count() as u64,
            },
            content,
            model: req.model.clone(),
            cached: false,
        })
    }
}
