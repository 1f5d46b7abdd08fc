//! Model provider clients and the retry policy shared by all of them.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine as _;
use kap_core::PromptRequest;
use rand::Rng;
use serde_json::json;

use crate::cache::{IndexEntry, Lookup, ReplayCache};
use crate::error::ProviderError;
use crate::par::RateLimiter;

/// A text-completion backend. Implementations must be thread-safe; the
/// pipeline keeps several calls in flight.
pub trait ProviderClient: Send + Sync {
    fn complete(&self, request: &PromptRequest, model_id: &str) -> Result<String, ProviderError>;
}

/// Exponential backoff with full jitter: before retry `n` (0-based) the
/// caller sleeps a uniform random duration in `[0, min(cap, base·2ⁿ)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base: Duration::from_secs(1), cap: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn with_attempts(attempts: u32) -> Self {
        Self { attempts: attempts.max(1), ..Self::default() }
    }

    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        self.base.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX)).min(self.cap)
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>, sleep: &dyn Fn(Duration)) -> Result<T, ProviderError> {
        let mut retry = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && retry + 1 < self.attempts.max(1) => {
                    let ceiling = self.backoff_ceiling(retry);
                    let nanos = rand::rng().random_range(0..=ceiling.as_nanos() as u64);
                    tracing::warn!(stage = "provider", attempt = retry + 1, "retrying after {e}");
                    sleep(Duration::from_nanos(nanos));
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

type Responder = Box<dyn Fn(&PromptRequest) -> Result<String, ProviderError> + Send + Sync>;

/// Deterministic in-process provider that counts its calls.
pub struct MockClient {
    respond: Responder,
    calls: AtomicUsize,
}

impl fmt::Debug for MockClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockClient").field("calls", &self.calls()).finish()
    }
}

impl MockClient {
    pub fn new(respond: impl Fn(&PromptRequest) -> Result<String, ProviderError> + Send + Sync + 'static) -> Self {
        Self { respond: Box::new(respond), calls: AtomicUsize::new(0) }
    }

    /// Always answers `text`.
    pub fn fixed(text: &str) -> Self {
        let text = text.to_string();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Returns the OCR block of an enhancement prompt (or the question of
    /// an augmentation prompt) unchanged.
    pub fn echo() -> Self {
        Self::new(|req| Ok(echo_payload(&req.user_text)))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn echo_payload(user_text: &str) -> String {
    let between = |open: &str, close: &str| {
        let start = user_text.find(open)? + open.len();
        let end = user_text[start..].find(close)? + start;
        Some(user_text[start..end].trim().to_string())
    };
    between("<ocr_text>", "</ocr_text>")
        .or_else(|| between("## QUESTION\n", "\n\n"))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "(page read from image)".to_string())
}

impl ProviderClient for MockClient {
    fn complete(&self, request: &PromptRequest, _model_id: &str) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(request)
    }
}

/// Fails every call; stands in wherever network access must not happen.
#[derive(Debug, Default)]
pub struct OfflineClient {
    attempts: AtomicUsize,
}

impl OfflineClient {
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl ProviderClient for OfflineClient {
    fn complete(&self, _: &PromptRequest, _: &str) -> Result<String, ProviderError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(ProviderError::NetworkForbidden)
    }
}

/// Anthropic Messages API client.
pub struct AnthropicClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
    max_tokens: u32,
}

impl fmt::Debug for AnthropicClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnthropicClient").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl AnthropicClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://api.anthropic.com/v1/messages";

    /// Reads the key from `key_env`; the key is held in memory only.
    pub fn from_env(key_env: &str, endpoint: Option<&str>) -> Result<Self, ProviderError> {
        let api_key = std::env::var(key_env).map_err(|_| ProviderError::MissingCredentials(key_env.to_string()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { http, endpoint: endpoint.unwrap_or(Self::DEFAULT_ENDPOINT).to_string(), api_key, max_tokens: 8192 })
    }

    fn body(&self, request: &PromptRequest, model_id: &str) -> serde_json::Value {
        let mut content = Vec::new();
        if let Some(img) = &request.image {
            content.push(json!({
                "type": "image",
                "source": {
                    "type": "base64",
                    "media_type": img.media_type,
                    "data": base64::engine::general_purpose::STANDARD.encode(&img.bytes),
                }
            }));
        }
        content.push(json!({ "type": "text", "text": request.user_text }));
        json!({
            "model": model_id,
            "max_tokens": self.max_tokens,
            "temperature": 0,
            "system": request.system_text,
            "messages": [{ "role": "user", "content": content }],
        })
    }
}

impl ProviderClient for AnthropicClient {
    fn complete(&self, request: &PromptRequest, model_id: &str) -> Result<String, ProviderError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .header("x-api-key", &self.api_key)
            .header("anthropic-version", "2023-06-01")
            .json(&self.body(request, model_id))
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status { status, body: text });
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let blocks = v["content"].as_array().ok_or_else(|| ProviderError::BadResponse("no content array".into()))?;
        Ok(blocks.iter().filter(|b| b["type"] == "text").filter_map(|b| b["text"].as_str()).collect())
    }
}

/// A client behind the replay cache, the shared rate limiter and the retry
/// policy. Every provider call in the pipeline goes through one of these.
pub struct Gateway<'a> {
    pub client: &'a dyn ProviderClient,
    pub cache: &'a ReplayCache,
    pub limiter: &'a RateLimiter,
    pub retry: RetryPolicy,
    pub sleep: fn(Duration),
}

impl<'a> Gateway<'a> {
    pub fn new(client: &'a dyn ProviderClient, cache: &'a ReplayCache, limiter: &'a RateLimiter, retry: RetryPolicy) -> Self {
        Self { client, cache, limiter, retry, sleep: std::thread::sleep }
    }

    /// Cached or fresh response for `request`, passed through `post`.
    /// A response that `post` rejects is never stored.
    pub fn call(
        &self,
        entry: &IndexEntry,
        request: &PromptRequest,
        model_id: &str,
        post: impl Fn(&str) -> crate::error::Result<String>,
    ) -> crate::error::Result<(String, Lookup)> {
        let (raw, lookup) = self.cache.get_or_fetch(entry, || {
            self.limiter.acquire();
            let raw = self.retry.run(|| self.client.complete(request, model_id), &self.sleep)?;
            post(&raw)?;
            Ok(raw)
        })?;
        Ok((post(&raw)?, lookup))
    }
}
