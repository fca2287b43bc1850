use crate::harness::grade::Grader;
use crate::provider::{ChatRequest, Message, Provider, ProviderError};
use crate::template::{TemplateError, TemplateName, TemplateSet};

/// Sampling parameters applied to every pipeline call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.0,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Everything a pipeline stage needs to issue calls: provider, templates,
/// sampling parameters and the grader used to branch on correctness.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub provider: &'a dyn Provider,
    pub templates: &'a TemplateSet,
    pub sampling: Sampling,
    pub grader: &'a Grader,
}

impl<'a> Pipeline<'a> {
    pub fn new(provider: &'a dyn Provider, templates: &'a TemplateSet, grader: &'a Grader) -> Self {
        Pipeline {
            provider,
            templates,
            sampling: Sampling::default(),
            grader,
        }
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    /// Same settings, different provider.
    pub fn with_provider<'b>(&self, provider: &'b dyn Provider) -> Pipeline<'b>
    where
        'a: 'b,
    {
        Pipeline {
            provider,
            templates: self.templates,
            sampling: self.sampling,
            grader: self.grader,
        }
    }

    pub fn request(&self, model: &str, messages: Vec<Message>) -> ChatRequest {
        let mut req = ChatRequest::new(model, messages);
        req.temperature = self.sampling.temperature;
        req.max_tokens = self.sampling.max_tokens;
        req
    }

    /// Renders `name` into a single user message and completes it on `model`.
    pub fn call(&self, model: &str, name: TemplateName, values: &[(&str, &str)]) -> Result<String, CallError> {
        let prompt = self.templates.render(name, values)?;
        self.send(self.request(model, vec![Message::user(prompt)]))
    }

    pub fn send(&self, req: ChatRequest) -> Result<String, CallError> {
        Ok(self.provider.complete(&req)?.content)
    }
}
