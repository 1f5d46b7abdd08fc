//! Embedding backends: the local hashed embedder, a remote
//! OpenAI-compatible endpoint, and a content-addressed cache in front of
//! either.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use kap_core::chunk::Chunk;
use kap_core::dense::{embed_text, DenseIndex, VectorRecord};
use kap_core::hash::FramedHasher;
use kap_core::{Embedder, HashedNgramEmbedder};
use serde_json::json;

use crate::cache::{IndexEntry, ReplayCache};
use crate::error::{ProviderError, Result};
use crate::par::{self, RateLimiter};
use crate::provider::RetryPolicy;

fn embed_err(e: impl fmt::Display) -> kap_core::Error {
    kap_core::Error::Embedding(e.to_string())
}

/// `POST {endpoint}` with `{"model", "input"}`, reading
/// `data[0].embedding`.
pub struct RemoteEmbedder {
    http: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    dim: usize,
    api_key: String,
    retry: RetryPolicy,
    limiter: RateLimiter,
}

impl fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteEmbedder").field("endpoint", &self.endpoint).field("model", &self.model).finish_non_exhaustive()
    }
}

impl RemoteEmbedder {
    pub fn from_env(endpoint: &str, model: &str, dim: usize, key_env: &str, retry: RetryPolicy, rate: f64) -> Result<Self, ProviderError> {
        let api_key = std::env::var(key_env).map_err(|_| ProviderError::MissingCredentials(key_env.to_string()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { http, endpoint: endpoint.into(), model: model.into(), dim, api_key, retry, limiter: RateLimiter::new(rate) })
    }

    /// A backend that can only be served from cache; any call fails.
    pub fn offline(endpoint: &str, model: &str, dim: usize) -> Self {
        Self {
            http: reqwest::blocking::Client::new(),
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            api_key: String::new(),
            retry: RetryPolicy::with_attempts(1),
            limiter: RateLimiter::unlimited(),
        }
    }

    fn request(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&json!({ "model": self.model, "input": text }))
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status { status, body });
        }
        let v: serde_json::Value = serde_json::from_str(&body).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let arr = v["data"][0]["embedding"].as_array().ok_or_else(|| ProviderError::BadResponse("no data[0].embedding".into()))?;
        arr.iter().map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| ProviderError::BadResponse("non-numeric embedding".into()))).collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn fingerprint(&self) -> String {
        format!("remote:{}@{}/{}", self.model, self.endpoint, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> kap_core::Result<Vec<f32>> {
        if self.api_key.is_empty() {
            return Err(embed_err(ProviderError::NetworkForbidden));
        }
        self.limiter.acquire();
        self.retry.run(|| self.request(text), &std::thread::sleep).map_err(embed_err)
    }
}

/// Stores raw backend vectors as little-endian f32 files keyed by
/// (fingerprint, text). Counts backend calls.
pub struct CachedEmbedder<'a, E> {
    inner: E,
    cache: &'a ReplayCache,
    calls: AtomicUsize,
}

impl<'a, E: Embedder> CachedEmbedder<'a, E> {
    pub fn new(inner: E, cache: &'a ReplayCache) -> Self {
        Self { inner, cache, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn key(&self, text: &str) -> String {
        FramedHasher::new().field(self.inner.fingerprint().as_bytes()).field(text.as_bytes()).finish_hex()
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<'_, E> {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_raw(&self, text: &str) -> kap_core::Result<Vec<f32>> {
        let key = self.key(text);
        if let Some(bytes) = self.cache.get_bytes(&key).map_err(embed_err)? {
            if bytes.len() != self.dim() * 4 {
                return Err(embed_err(format!("embedding cache entry {key} holds {} bytes, expected {}", bytes.len(), self.dim() * 4)));
            }
            return Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
        }
        if self.cache.replay_only() {
            return Err(embed_err(format!("embedding cache has no entry for key {key}")));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let v = self.inner.embed_raw(text)?;
        if v.len() != self.dim() {
            return Err(kap_core::Error::DimensionMismatch { fingerprint: self.fingerprint(), expected: self.dim(), got: v.len() });
        }
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let entry = IndexEntry { key, fingerprint: self.fingerprint(), ..Default::default() };
        self.cache.put_bytes(&entry, &bytes).map_err(embed_err)?;
        Ok(v)
    }
}

/// The embedder a run is configured with.
pub enum Backend<'a> {
    Hashed(HashedNgramEmbedder),
    Remote(CachedEmbedder<'a, RemoteEmbedder>),
}

impl Embedder for Backend<'_> {
    fn fingerprint(&self) -> String {
        match self {
            Backend::Hashed(e) => e.fingerprint(),
            Backend::Remote(e) => e.fingerprint(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Backend::Hashed(e) => e.dim(),
            Backend::Remote(e) => e.dim(),
        }
    }

    fn embed_raw(&self, text: &str) -> kap_core::Result<Vec<f32>> {
        match self {
            Backend::Hashed(e) => e.embed_raw(text),
            Backend::Remote(e) => e.embed_raw(text),
        }
    }
}

/// Embeds chunks `workers` at a time and builds the index. Errors carry
/// the chunk id.
pub fn build_dense<E: Embedder + Sync + ?Sized>(chunks: &[Chunk], embedder: &E, workers: usize) -> Result<DenseIndex> {
    let vectors = par::map(chunks, workers, |c| {
        embed_text(embedder, &c.text).map_err(|e| kap_core::Error::Embedding(format!("chunk {}: {e}", c.chunk_id)))
    });
    let mut records = Vec::with_capacity(chunks.len());
    for (c, v) in chunks.iter().zip(vectors) {
        records.push(VectorRecord { chunk_id: c.chunk_id.clone(), pid: c.pid.clone(), vector: v? });
    }
    Ok(DenseIndex::from_records(embedder.fingerprint(), embedder.dim(), records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kap_core::ChunkParams;
    use std::collections::BTreeMap;

    fn chunks() -> Vec<Chunk> {
        let pages: BTreeMap<(String, u32), String> = [(("A".to_string(), 1), "一 二 三 四 五 六".to_string())].into_iter().collect();
        kap_core::chunk::chunk_corpus(&pages, &ChunkParams::new(2, 0), &kap_core::CjkWordCounter).unwrap()
    }

    #[test]
    fn primed_cache_makes_no_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ReplayCache::open(dir.path(), false).unwrap();
        let emb = CachedEmbedder::new(HashedNgramEmbedder::default(), &cache);
        let first = build_dense(&chunks(), &emb, 2).unwrap();
        assert_eq!(emb.calls(), 3);

        let ro = ReplayCache::open(dir.path(), true).unwrap();
        let emb2 = CachedEmbedder::new(HashedNgramEmbedder::default(), &ro);
        assert_eq!(build_dense(&chunks(), &emb2, 2).unwrap(), first);
        assert_eq!(emb2.calls(), 0);
        assert_eq!(first, DenseIndex::build(&chunks(), &HashedNgramEmbedder::default()).unwrap());
    }

    #[test]
    fn replay_only_miss_names_the_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let ro = ReplayCache::open(dir.path(), true).unwrap();
        let emb = CachedEmbedder::new(HashedNgramEmbedder::default(), &ro);
        let err = build_dense(&chunks(), &emb, 1).unwrap_err().to_string();
        assert!(err.contains("A#p1-1#0"), "{err}");
    }

    #[test]
    fn empty_corpus_gives_empty_index() {
        assert!(build_dense(&[], &HashedNgramEmbedder::default(), 4).unwrap().is_empty());
    }
}
