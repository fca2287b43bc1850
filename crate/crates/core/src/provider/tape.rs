use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{cache_key, CacheKey, ChatRequest, ChatResponse, Provider, ProviderError};
use crate::fsutil::{atomic_write, to_pretty_json};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeRecord {
    pub key: CacheKey,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// An ordered list of recorded exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tape {
    pub format_version: u32,
    pub records: Vec<TapeRecord>,
}

impl Tape {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ProviderError::Config(format!("tape {}: {e}", path.display())))?;
        let tape: Tape = serde_json::from_slice(&bytes)
            .map_err(|e| ProviderError::Config(format!("tape {}: {e}", path.display())))?;
        if tape.format_version != FORMAT_VERSION {
            return Err(ProviderError::Config(format!(
                "tape {}: unsupported format_version {}",
                path.display(),
                tape.format_version
            )));
        }
        Ok(tape)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        let bytes = to_pretty_json(self).map_err(|e| ProviderError::Cache(e.to_string()))?;
        atomic_write(path, &bytes)
            .map_err(|e| ProviderError::Cache(format!("tape {}: {e}", path.display())))
    }
}

/// Records every exchange that passes through to the wrapped provider.
pub struct RecordingProvider<P> {
    inner: P,
    records: Mutex<Vec<TapeRecord>>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> Tape {
        Tape {
            format_version: FORMAT_VERSION,
            records: self.records.lock().unwrap().clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        self.tape().save(path)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let resp = self.inner.complete(req)?;
        let mut stored = resp.clone();
        stored.cached = false;
        self.records.lock().unwrap().push(TapeRecord {
            key: cache_key(req),
            request: req.canonicalized(),
            response: stored,
        });
        Ok(resp)
    }
}

struct Slot {
    responses: Vec<ChatResponse>,
    next: usize,
}

/// Answers strictly from a tape, keyed by [`CacheKey`].
///
/// A key recorded several times is answered in recorded order, then the last
/// response repeats. A request absent from the tape is a script-exhausted error.
pub struct ReplayProvider {
    slots: Mutex<HashMap<CacheKey, Slot>>,
}

impl ReplayProvider {
    pub fn new(tape: Tape) -> Self {
        let mut slots: HashMap<CacheKey, Slot> = HashMap::new();
        for rec in tape.records {
            slots
                .entry(rec.key)
                .or_insert_with(|| Slot {
                    responses: Vec::new(),
                    next: 0,
                })
                .responses
                .push(rec.response);
        }
        ReplayProvider {
            slots: Mutex::new(slots),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        Tape::load(path).map(ReplayProvider::new)
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let key = cache_key(req);
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.get_mut(&key).ok_or_else(|| ProviderError::exhausted(req))?;
        let i = slot.next.min(slot.responses.len() - 1);
        slot.next += 1;
        Ok(slot.responses[i].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Message, MockProvider, MockRule};

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("mock", vec![Message::user(text)])
    }

    #[test]
    fn record_then_replay_three_exchanges() {
        let live = MockProvider::new()
            .rule(MockRule::new(&["a"], &["alpha"]))
            .rule(MockRule::new(&["b"], &["beta"]))
            .rule(MockRule::new(&["c"], &["gamma"]));
        let rec = RecordingProvider::new(live);
        let originals: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|t| rec.complete(&req(t)).unwrap().content)
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tape.json");
        rec.save(&path).unwrap();

        let replay = ReplayProvider::load(&path).unwrap();
        let replayed: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|t| replay.complete(&req(t)).unwrap().content)
            .collect();
        assert_eq!(originals, replayed);
    }

    #[test]
    fn altered_request_misses() {
        let rec = RecordingProvider::new(MockProvider::echo("x"));
        rec.complete(&req("original")).unwrap();
        let replay = ReplayProvider::new(rec.tape());
        let err = replay.complete(&req("altered")).unwrap_err();
        match err {
            ProviderError::ScriptExhausted { key, excerpt } => {
                assert_eq!(key, cache_key(&req("altered")).0);
                assert!(excerpt.contains("altered"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_key_replays_in_order() {
        let live = MockProvider::new().rule(MockRule::new(&["q"], &["1", "2"]));
        let rec = RecordingProvider::new(live);
        rec.complete(&req("q")).unwrap();
        rec.complete(&req("q")).unwrap();
        let replay = ReplayProvider::new(rec.tape());
        let got: Vec<_> = (0..3).map(|_| replay.complete(&req("q")).unwrap().content).collect();
        assert_eq!(got, ["1", "2", "2"]);
    }
}
