use std::collections::BTreeMap;
use std::sync::Arc;

use super::{ChatRequest, ChatResponse, Provider, ProviderError};

/// Dispatches each request to the backend registered under its model name.
#[derive(Default, Clone)]
pub struct Router {
    backends: BTreeMap<String, Arc<dyn Provider>>,
}

impl Router {
    pub fn new() -> Self {
        Router::default()
    }

    pub fn with(mut self, model: impl Into<String>, backend: Arc<dyn Provider>) -> Self {
        self.insert(model, backend);
        self
    }

    pub fn insert(&mut self, model: impl Into<String>, backend: Arc<dyn Provider>) {
        self.backends.insert(model.into(), backend);
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn has_model(&self, model: &str) -> bool {
        self.backends.contains_key(model)
    }
}

impl Provider for Router {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let backend = self.backends.get(&req.model).ok_or_else(|| {
            ProviderError::Config(format!(
                "model `{}` is not configured (known: {})",
                req.model,
                self.backends.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        backend.complete(req)
    }
}
