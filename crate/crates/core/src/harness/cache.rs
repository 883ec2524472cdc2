use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{write_atomic, HarnessError};
use crate::agents::{AgentError, AgentResponse, AgentSpec, Backend, Invoke, InvokeContext};

/// Content address of one agent call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn new(
        backend_kind: &str,
        model_identity: &str,
        prompt: &str,
        temperature: f64,
        round: u32,
        instance_id: u64,
    ) -> Self {
        let mut h = Sha256::new();
        // Length-prefix the variable fields so no two tuples collide by
        // concatenation.
        for field in [backend_kind, model_identity, prompt] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
        h.update(temperature.to_bits().to_le_bytes());
        h.update(round.to_le_bytes());
        h.update(instance_id.to_le_bytes());
        Self(h.finalize().into())
    }

    pub fn for_call(agent: &AgentSpec, prompt: &str, ctx: &InvokeContext<'_>) -> Self {
        Self::new(
            agent.backend.kind(),
            &agent.backend.model_identity(),
            prompt,
            agent.decoding.temperature,
            ctx.round,
            ctx.instance.id,
        )
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// On-disk response cache, one JSON file per key under a two-character
/// fan-out directory.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        let hex = key.hex();
        self.dir.join(&hex[..2]).join(format!("{hex}.json"))
    }

    /// Returns the stored response, or `None` when the key is absent. An
    /// unreadable entry counts as a miss and is overwritten on the next put.
    pub fn get(&self, key: &CacheKey) -> Option<AgentResponse> {
        let found = std::fs::read(self.path(key))
            .ok()
            .and_then(|bytes| serde_json::from_slice::<AgentResponse>(&bytes).ok());
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn put(&self, key: &CacheKey, response: &AgentResponse) -> Result<(), HarnessError> {
        let path = self.path(key);
        let json = serde_json::to_vec(response).expect("response serializes");
        write_atomic(&path, &json)
            .map_err(|e| HarnessError::Cache(format!("{}: {e}", path.display())))
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Looks `agent`'s call up in `cache` before invoking the backend, and
/// stores fresh responses. Replay backends bypass the cache: they are
/// already a lookup. A failed cache write is an error, not a warning, so a
/// misconfigured cache never goes unnoticed.
pub fn cached_invoke(
    cache: Option<&ResponseCache>,
    invoker: &dyn Invoke,
    agent: &AgentSpec,
    prompt: &str,
    ctx: &InvokeContext<'_>,
) -> Result<AgentResponse, HarnessError> {
    let cache = match cache {
        Some(c) if !matches!(agent.backend, Backend::Replay { .. }) => c,
        _ => return Ok(invoker.invoke(agent, prompt, ctx)?),
    };
    let key = CacheKey::for_call(agent, prompt, ctx);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let response = invoker.invoke(agent, prompt, ctx)?;
    cache.put(&key, &response)?;
    Ok(response)
}

/// An [`Invoke`] wrapper that routes every call through [`cached_invoke`].
pub struct CachedInvoker<'a> {
    pub inner: &'a dyn Invoke,
    pub cache: Option<&'a ResponseCache>,
}

impl Invoke for CachedInvoker<'_> {
    fn invoke(
        &self,
        agent: &AgentSpec,
        prompt: &str,
        ctx: &InvokeContext<'_>,
    ) -> Result<AgentResponse, AgentError> {
        cached_invoke(self.cache, self.inner, agent, prompt, ctx).map_err(|e| match e {
            HarnessError::Agent(inner) => inner,
            other => AgentError::Unavailable(other.to_string()),
        })
    }
}
