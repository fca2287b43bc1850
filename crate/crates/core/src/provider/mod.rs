//! Chat-completion access.
//!
//! Every pipeline stage talks to a [`Provider`]. Concrete providers are layered:
//! a [`Router`] dispatches by model name to [`HttpProvider`]s or [`MockProvider`]s,
//! [`CachedProvider`] adds the content-addressed response cache, and
//! [`RecordingProvider`] / [`ReplayProvider`] capture and replay tapes.

mod cache;
mod http;
mod mock;
mod router;
mod tape;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fsutil::sha256_hex;

pub use cache::{CachedProvider, ResponseCache};
pub use http::{HttpProvider, API_KEY_ENV};
pub use mock::{MockProvider, MockRule, MockScript};
pub use router::Router;
pub use tape::{RecordingProvider, ReplayProvider, Tape, TapeRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A chat-completion request. Field order here is the canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Option<Vec<String>>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 2048,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("messages must be nonempty".into()));
        }
        match self.messages.iter().find(|m| m.role != Role::System) {
            Some(m) if m.role != Role::User => {
                return Err(ProviderError::InvalidRequest(
                    "first non-system message must have role user".into(),
                ))
            }
            None => {
                return Err(ProviderError::InvalidRequest("request has no user message".into()))
            }
            _ => {}
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest("max_tokens must be > 0".into()));
        }
        Ok(())
    }

    /// Copy with message contents whitespace-normalized: CRLF folded to LF,
    /// trailing spaces stripped per line, and the whole content trimmed.
    pub fn canonicalized(&self) -> ChatRequest {
        let mut out = self.clone();
        for m in &mut out.messages {
            m.content = normalize_whitespace(&m.content);
        }
        out
    }

    /// Compact JSON of the canonicalized request in fixed field order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.canonicalized()).expect("chat request serializes")
    }

    /// All message contents joined, used for substring matching.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.replace("\r\n", "\n")
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub model: String,
    pub usage: Usage,
    #[serde(default)]
    pub cached: bool,
}

/// Content digest of a canonical request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// SHA-256 over the canonical JSON of `req`.
pub fn cache_key(req: &ChatRequest) -> CacheKey {
    CacheKey(sha256_hex(req.canonical_json().as_bytes()))
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider error{}: {message}", .status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted: no reply for request {key} ({excerpt})")]
    ScriptExhausted { key: String, excerpt: String },
    #[error("cache error: {0}")]
    Cache(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }

    pub(crate) fn exhausted(req: &ChatRequest) -> Self {
        let mut excerpt: String = req.last_user_content().chars().take(80).collect();
        if excerpt.len() < req.last_user_content().len() {
            excerpt.push('…');
        }
        ProviderError::ScriptExhausted {
            key: cache_key(req).0,
            excerpt: format!("model {}, prompt {:?}", req.model, excerpt),
        }
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(req)
    }
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(req)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(req)
    }
}

/// Counts the calls that pass through it.
pub struct Counting<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: Provider> Counting<P> {
    pub fn new(inner: P) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Provider> Provider for Counting<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

/// Retries retryable failures with exponential backoff.
pub struct RetryingProvider<P> {
    inner: P,
    max_attempts: u32,
    base_delay: Duration,
}

impl<P: Provider> RetryingProvider<P> {
    pub fn new(inner: P, max_attempts: u32, base_delay: Duration) -> Self {
        RetryingProvider {
            inner,
            max_attempts: max_attempts.max(1),
            base_delay,
        }
    }
}

impl<P: Provider> Provider for RetryingProvider<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.inner.complete(req) {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    let delay = self.base_delay * 2u32.saturating_pow(attempt - 1);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying chat completion");
                    thread::sleep(delay);
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_request() -> ChatRequest {
        ChatRequest {
            model: "mini".into(),
            messages: vec![
                Message::system("You are a careful reasoner."),
                Message::user("What is 2 + 2?\r\nAnswer in <answer></answer> tags.  "),
            ],
            temperature: 0.0,
            max_tokens: 256,
            stop: None,
        }
    }

    #[test]
    fn field_order_does_not_change_digest() {
        let a: ChatRequest = serde_json::from_str(
            r#"{"model":"m","messages":[{"role":"user","content":"hi"}],"temperature":0.0,"max_tokens":5}"#,
        )
        .unwrap();
        let b: ChatRequest = serde_json::from_str(
            r#"{"max_tokens":5,"temperature":0.0,"messages":[{"content":"hi","role":"user"}],"model":"m","stop":null}"#,
        )
        .unwrap();
        assert_eq!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn temperature_is_semantic() {
        let a = fixture_request();
        let mut b = a.clone();
        b.temperature = 0.7;
        assert_ne!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn whitespace_variants_collide() {
        let a = fixture_request();
        let mut b = a.clone();
        b.messages[1].content = "What is 2 + 2?\nAnswer in <answer></answer> tags.".into();
        assert_eq!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn fixture_digest_is_pinned() {
        // Pinned once from the canonicalizer; a change here invalidates every cache and tape.
        let req = fixture_request();
        assert_eq!(
            req.canonical_json(),
            r#"{"model":"mini","messages":[{"role":"system","content":"You are a careful reasoner."},{"role":"user","content":"What is 2 + 2?\nAnswer in <answer></answer> tags."}],"temperature":0.0,"max_tokens":256,"stop":null}"#
        );
        assert_eq!(
            cache_key(&req).as_str(),
            sha256_hex(req.canonical_json().as_bytes())
        );
        assert_eq!(cache_key(&req).as_str(), PINNED_FIXTURE_DIGEST);
    }

    const PINNED_FIXTURE_DIGEST: &str = "fb8ace9ec98c241f71fc456c181ec40f5e2e85d7f96ab14d9561956395c1b138";

    #[test]
    fn request_validation() {
        let mut r = fixture_request();
        assert!(r.validate().is_ok());
        r.messages = vec![Message::system("s"), Message::assistant("a")];
        assert!(r.validate().is_err());
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = fixture_request();
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl Provider for Flaky {
        fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let left = self.failures.load(Ordering::SeqCst);
            if left > 0 {
                self.failures.store(left - 1, Ordering::SeqCst);
                return Err(ProviderError::Transport("connection reset".into()));
            }
            Ok(ChatResponse {
                content: "ok".into(),
                model: req.model.clone(),
                usage: Usage::default(),
                cached: false,
            })
        }
    }

    #[test]
    fn retries_transport_errors_then_succeeds() {
        let p = RetryingProvider::new(
            Flaky {
                failures: AtomicUsize::new(2),
            },
            3,
            Duration::from_millis(1),
        );
        assert_eq!(p.complete(&fixture_request()).unwrap().content, "ok");
    }

    #[test]
    fn retries_are_bounded() {
        let p = RetryingProvider::new(
            Flaky {
                failures: AtomicUsize::new(5),
            },
            2,
            Duration::from_millis(1),
        );
        assert!(matches!(
            p.complete(&fixture_request()),
            Err(ProviderError::Transport(_))
        ));
    }
}
