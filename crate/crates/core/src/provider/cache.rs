use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{cache_key, CacheKey, ChatRequest, ChatResponse, Provider, ProviderError};
use crate::fsutil::{atomic_write, to_pretty_json};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: ChatRequest,
    response: ChatResponse,
}

/// Content-addressed response store: in memory, and optionally one
/// `<digest>.json` file per entry under a directory.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<CacheKey, ChatResponse>>,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    inserts: AtomicUsize,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            mem: RwLock::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            inserts: AtomicUsize::new(0),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| ProviderError::Cache(format!("{}: {e}", dir.display())))?;
        let mut c = ResponseCache::in_memory();
        c.dir = Some(dir);
        Ok(c)
    }

    fn entry_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<ChatResponse>, ProviderError> {
        if let Some(r) = self.mem.read().unwrap().get(key) {
            return Ok(Some(r.clone()));
        }
        let Some(path) = self.entry_path(key) else {
            return Ok(None);
        };
        match std::fs::read(&path) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes)
                    .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
                self.mem
                    .write()
                    .unwrap()
                    .insert(key.clone(), entry.response.clone());
                Ok(Some(entry.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    fn insert(&self, key: &CacheKey, req: &ChatRequest, resp: &ChatResponse) -> Result<(), ProviderError> {
        let mut stored = resp.clone();
        stored.cached = false;
        if let Some(path) = self.entry_path(key) {
            let entry = CacheEntry {
                request: req.canonicalized(),
                response: stored.clone(),
            };
            let bytes = to_pretty_json(&entry).map_err(|e| ProviderError::Cache(e.to_string()))?;
            atomic_write(&path, &bytes)
                .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
        }
        self.mem.write().unwrap().insert(key.clone(), stored);
        self.inserts.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    /// Number of entries written since construction.
    pub fn insert_count(&self) -> usize {
        self.inserts.load(Ordering::SeqCst)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn lock_for(&self, key: &CacheKey) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone()
    }
}

/// Serves repeated requests from a [`ResponseCache`].
///
/// Concurrent misses on the same key are serialized, so the inner provider is
/// called at most once per key and the cache is written at most once.
pub struct CachedProvider<P> {
    inner: P,
    cache: ResponseCache,
}

impl<P: Provider> CachedProvider<P> {
    pub fn new(inner: P, cache: ResponseCache) -> Self {
        CachedProvider { inner, cache }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Provider> Provider for CachedProvider<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.validate()?;
        let key = cache_key(req);
        if let Some(mut hit) = self.cache.get(&key)? {
            hit.cached = true;
            return Ok(hit);
        }
        let lock = self.cache.lock_for(&key);
        let _guard = lock.lock().unwrap();
        if let Some(mut hit) = self.cache.get(&key)? {
            hit.cached = true;
            return Ok(hit);
        }
        let resp = self.inner.complete(req)?;
        self.cache.insert(&key, req, &resp)?;
        Ok(resp)
    }
}
