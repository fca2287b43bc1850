//! Run configuration file and provider stack assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::execution::DEFAULT_REFINE_CAP;
use crate::learning::DEFAULT_MAX_STEPS;
use crate::pipeline::Sampling;
use crate::provider::{
    CachedProvider, Counting, HttpProvider, MockProvider, MockScript, Provider, ProviderError, RecordingProvider,
    ReplayProvider, ResponseCache, RetryingProvider, Router,
};
use crate::template::{TemplateError, TemplateSet};

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "GUIDED_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    File { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// One logical model: a chat-completions endpoint or a mock script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Model id sent to the endpoint; defaults to the logical name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub models: BTreeMap<String, ModelEntry>,
    pub cache_dir: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    /// Template name → version, for templates loaded from `template_dir`.
    pub template_pins: BTreeMap<String, String>,
    pub runs_dir: PathBuf,
    pub guideline_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub strict: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_steps: usize,
    pub refine_rounds: u32,
    pub refine_cap: u32,
    pub retries: u32,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            models: BTreeMap::new(),
            cache_dir: None,
            template_dir: None,
            template_pins: BTreeMap::new(),
            runs_dir: PathBuf::from("runs"),
            guideline_dir: None,
            concurrency: 4,
            split_seed: 0,
            train_fraction: 0.25,
            strict: false,
            temperature: 0.0,
            max_tokens: 2048,
            max_steps: DEFAULT_MAX_STEPS,
            refine_rounds: 1,
            refine_cap: DEFAULT_REFINE_CAP,
            retries: 3,
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: CliConfig = toml::from_str(text).map_err(|e| ConfigError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a TOML config; relative paths in it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg: CliConfig = toml::from_str(&text).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut cfg.cache_dir, &mut cfg.template_dir, &mut cfg.guideline_dir]
            .into_iter()
            .flatten()
        {
            rebase(base, dir);
        }
        rebase(base, &mut cfg.runs_dir);
        for entry in cfg.models.values_mut() {
            if let Some(s) = entry.mock_script.as_mut() {
                rebase(base, s);
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        for (name, e) in &self.models {
            match (&e.base_url, &e.mock_script) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::Invalid(format!(
                        "model `{name}` sets both base_url and mock_script"
                    )))
                }
                (None, None) => {
                    return Err(ConfigError::Invalid(format!(
                        "model `{name}` needs base_url or mock_script"
                    )))
                }
                _ => {}
            }
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ConfigError::Invalid("train_fraction must be in (0, 1)".into()));
        }
        if self.refine_rounds > self.refine_cap {
            return Err(ConfigError::Invalid(format!(
                "refine_rounds {} exceeds refine_cap {}",
                self.refine_rounds, self.refine_cap
            )));
        }
        Ok(())
    }

    /// Every named model must appear in the models table.
    pub fn require_models<'m>(&self, names: impl IntoIterator<Item = &'m str>) -> Result<(), ConfigError> {
        for n in names {
            if !self.models.contains_key(n) {
                let known: Vec<&str> = self.models.keys().map(String::as_str).collect();
                return Err(ConfigError::Invalid(format!(
                    "model `{n}` is not configured (known: {})",
                    if known.is_empty() { "none".to_string() } else { known.join(", ") }
                )));
            }
        }
        Ok(())
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        Ok(match &self.template_dir {
            Some(dir) => TemplateSet::from_dir(dir, &self.template_pins)?,
            None => TemplateSet::builtin(),
        })
    }

    /// Routes every configured model to its backend.
    pub fn router(&self) -> Result<Router, ConfigError> {
        let api_key = std::env::var(crate::provider::API_KEY_ENV).ok();
        let mut router = Router::new();
        for (name, e) in &self.models {
            let backend: Arc<dyn Provider> = if let Some(script) = &e.mock_script {
                Arc::new(MockProvider::from_script(MockScript::load(script)?))
            } else {
                let url = e.base_url.as_deref().unwrap_or_default();
                let http = HttpProvider::new(
                    url,
                    e.model.clone().unwrap_or_else(|| name.clone()),
                    api_key.clone(),
                    Duration::from_secs(e.timeout_secs.unwrap_or(120)),
                )?;
                Arc::new(RetryingProvider::new(http, self.retries.max(1), Duration::from_millis(500)))
            };
            router.insert(name.clone(), backend);
        }
        Ok(router)
    }
}

/// Where completions come from for one invocation.
pub enum Source {
    Live,
    Replay(PathBuf),
}

/// Assembled provider layers, with handles for live-call counts and tape output.
pub struct ProviderStack {
    live: Arc<Counting<Arc<dyn Provider>>>,
    cache: Option<Arc<CachedProvider<Arc<dyn Provider>>>>,
    recorder: Option<Arc<RecordingProvider<Arc<dyn Provider>>>>,
    top: Arc<dyn Provider>,
}

impl ProviderStack {
    /// `record` wraps everything in a tape recorder; `use_cache` adds the
    /// response cache (on disk when `cfg.cache_dir` is set).
    pub fn build(cfg: &CliConfig, source: Source, use_cache: bool, record: bool) -> Result<Self, ConfigError> {
        let base: Arc<dyn Provider> = match source {
            Source::Live => Arc::new(cfg.router()?),
            Source::Replay(path) => Arc::new(ReplayProvider::load(&path)?),
        };
        Ok(ProviderStack::from_base(base, cfg.cache_dir.as_deref(), use_cache, record)?)
    }

    pub fn from_base(
        base: Arc<dyn Provider>,
        cache_dir: Option<&Path>,
        use_cache: bool,
        record: bool,
    ) -> Result<Self, ProviderError> {
        let live = Arc::new(Counting::new(base));
        let mut top: Arc<dyn Provider> = live.clone();
        let mut cache = None;
        if use_cache {
            let store = match cache_dir {
                Some(d) => ResponseCache::on_disk(d)?,
                None => ResponseCache::in_memory(),
            };
            let c = Arc::new(CachedProvider::new(top, store));
            top = c.clone();
            cache = Some(c);
        }
        let mut recorder = None;
        if record {
            let r = Arc::new(RecordingProvider::new(top));
            top = r.clone();
            recorder = Some(r);
        }
        Ok(ProviderStack {
            live,
            cache,
            recorder,
            top,
        })
    }

    pub fn provider(&self) -> &dyn Provider {
        self.top.as_ref()
    }

    /// Calls that reached the backend (not served by the cache).
    pub fn live_calls(&self) -> usize {
        self.live.count()
    }

    pub fn cache_inserts(&self) -> usize {
        self.cache.as_ref().map(|c| c.cache().insert_count()).unwrap_or(0)
    }

    pub fn save_tape(&self, path: &Path) -> Result<(), ProviderError> {
        match &self.recorder {
            Some(r) => r.save(path),
            None => Err(ProviderError::Config("no recorder in this provider stack".into())),
        }
    }
}
