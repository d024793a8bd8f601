//! HTTP client for OpenAI-compatible chat-completions endpoints, with a
//! content-addressed disk cache in front of it.
//!
//! Every completion request is keyed by a digest of the fields that define
//! its content — model id, prompt text, temperature, max_tokens, and sample
//! index — so separately hosted replicas of the same model share cache
//! entries and re-running a pipeline stage against a warm cache performs no
//! network calls at all. Transport-level failures retry with exponential
//! backoff; auth failures do not.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use tokio::time::Instant;

use crate::templates::PromptText;
use crate::util::{atomic_write, sha256_hex};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("endpoint unreachable after {attempts} attempt(s): {reason}")]
    EndpointUnreachable { attempts: u32, reason: String },
    #[error("authentication failed with status {0}")]
    AuthFailure(u16),
    #[error("endpoint returned an empty completion")]
    EmptyResponse,
    #[error("endpoint rejected the request with status {status}: {body}")]
    RequestRejected { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Protocol(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("cache IO: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Judge,
}

/// How failed attempts are spaced: `base * factor^attempt`, jittered by
/// ±`jitter` and capped at `cap_secs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackoffPolicy {
    pub base_secs: f64,
    pub factor: f64,
    pub jitter: f64,
    pub cap_secs: f64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self { base_secs: 1.0, factor: 2.0, jitter: 0.2, cap_secs: 60.0 }
    }
}

impl BackoffPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let raw = (self.base_secs * self.factor.powi(attempt as i32)).min(self.cap_secs);
        let jitter = 1.0 + rand::thread_rng().gen_range(-self.jitter..=self.jitter);
        Duration::from_secs_f64((raw * jitter).max(0.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub role: Role,
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key. Keys are never
    /// written to config files or cache records.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub rate_limit_rps: f64,
    #[serde(default)]
    pub backoff: BackoffPolicy,
}

impl EndpointConfig {
    pub fn new(role: Role, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            role,
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_env: None,
            timeout_secs: 30.0,
            max_retries: 3,
            rate_limit_rps: 50.0,
            backoff: BackoffPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::InvalidConfig("base_url is empty".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidConfig("model_id is empty".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(GatewayError::InvalidConfig(format!(
                "timeout_secs must be > 0, got {}",
                self.timeout_secs
            )));
        }
        if self.rate_limit_rps.is_nan() || self.rate_limit_rps <= 0.0 {
            return Err(GatewayError::InvalidConfig(format!(
                "rate_limit_rps must be > 0, got {}",
                self.rate_limit_rps
            )));
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(key) => Ok(Some(key)),
                Err(_) => Err(GatewayError::InvalidConfig(format!(
                    "environment variable {var} named by api_key_env is not set"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: PromptText,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated samples of the same prompt in the cache.
    pub sample_index: u32,
    /// Forwarded to endpoints that accept a seed parameter; excluded from
    /// the cache key because servers treat it inconsistently.
    pub seed_hint: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: TokenUsage,
    /// True when the result came from the disk cache without a network call.
    pub cached: bool,
}

/// Digest identifying a completion by content: model, prompt text, decoding
/// parameters, and sample index. Endpoint location, credentials, seed hints,
/// and timestamps deliberately stay out of it.
pub fn cache_key(endpoint: &EndpointConfig, request: &CompletionRequest) -> String {
    let canonical = format!(
        "v1\u{1f}{}\u{1f}{}\u{1f}{:016x}\u{1f}{}\u{1f}{}",
        endpoint.model_id,
        request.prompt.text,
        request.temperature.to_bits(),
        request.max_tokens,
        request.sample_index,
    );
    sha256_hex(canonical.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model_id: String,
    prompt: String,
    temperature: f64,
    max_tokens: u32,
    sample_index: u32,
    text: String,
    finish_reason: FinishReason,
    usage: TokenUsage,
    created_at: String,
}

#[derive(Debug, Clone)]
struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    fn record_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn get(&self, key: &str) -> Result<Option<CacheRecord>, GatewayError> {
        let path = self.record_path(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let record: CacheRecord = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::Protocol(format!("corrupt cache record {}: {e}", path.display())))?;
                if record.key != key {
                    return Err(GatewayError::Protocol(format!(
                        "cache record {} carries mismatched key",
                        path.display()
                    )));
                }
                Ok(Some(record))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn put(&self, record: &CacheRecord) -> Result<(), GatewayError> {
        let bytes = serde_json::to_vec_pretty(record)
            .map_err(|e| GatewayError::Protocol(format!("serializing cache record: {e}")))?;
        atomic_write(&self.record_path(&record.key), &bytes)?;
        Ok(())
    }
}

/// Spaces acquisitions at least `1/rps` apart, shared by all workers that
/// talk to the same endpoint.
struct RateLimiter {
    min_interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    fn new(rps: f64) -> Self {
        Self {
            min_interval: Duration::from_secs_f64(1.0 / rps),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    async fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().await;
            let now = Instant::now();
            let slot = if *next > now { *next } else { now };
            *next = slot + self.min_interval;
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

pub struct Gateway {
    http: reqwest::Client,
    cache: DiskCache,
    limiters: Mutex<HashMap<String, Arc<RateLimiter>>>,
    network_calls: AtomicU64,
}

impl Gateway {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = cache_dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            http: reqwest::Client::new(),
            cache: DiskCache { dir },
            limiters: Mutex::new(HashMap::new()),
            network_calls: AtomicU64::new(0),
        })
    }

    /// HTTP attempts made by this gateway instance, cache hits excluded.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    async fn limiter(&self, endpoint: &EndpointConfig) -> Arc<RateLimiter> {
        let key = format!("{:?}|{}|{}", endpoint.role, endpoint.base_url, endpoint.model_id);
        let mut limiters = self.limiters.lock().await;
        limiters
            .entry(key)
            .or_insert_with(|| Arc::new(RateLimiter::new(endpoint.rate_limit_rps)))
            .clone()
    }

    /// Completes one request, consulting the cache first. Cache hits return
    /// `cached: true` and touch the network not at all; misses call the
    /// endpoint with retry/backoff and persist the completion before
    /// returning it with `cached: false`.
    pub async fn complete(
        &self,
        endpoint: &EndpointConfig,
        request: &CompletionRequest,
    ) -> Result<CompletionResult, GatewayError> {
        endpoint.validate()?;
        let key = cache_key(endpoint, request);
        if let Some(record) = self.cache.get(&key)? {
            return Ok(CompletionResult {
                text: record.text,
                finish_reason: record.finish_reason,
                usage: record.usage,
                cached: true,
            });
        }
        let result = self.complete_uncached(endpoint, request).await?;
        self.cache.put(&CacheRecord {
            key,
            model_id: endpoint.model_id.clone(),
            prompt: request.prompt.text.clone(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            sample_index: request.sample_index,
            text: result.text.clone(),
            finish_reason: result.finish_reason,
            usage: result.usage,
            created_at: chrono::Utc::now().to_rfc3339(),
        })?;
        Ok(result)
    }

    async fn complete_uncached(
        &self,
        endpoint: &EndpointConfig,
        request: &CompletionRequest,
    ) -> Result<CompletionResult, GatewayError> {
        let api_key = endpoint.api_key()?;
        let mut body = serde_json::json!({
            "model": endpoint.model_id,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed_hint {
            body["seed"] = serde_json::json!(seed);
        }
        let limiter = self.limiter(endpoint).await;
        let url = endpoint.completions_url();
        let mut last_reason = String::new();
        for attempt in 0..=endpoint.max_retries {
            if attempt > 0 {
                tokio::time::sleep(endpoint.backoff.delay(attempt - 1)).await;
            }
            limiter.acquire().await;
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            let mut req = self
                .http
                .post(&url)
                .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
                .json(&body);
            if let Some(key) = &api_key {
                req = req.bearer_auth(key);
            }
            match req.send().await {
                Ok(response) => {
                    let status = response.status();
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(GatewayError::AuthFailure(status.as_u16()));
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_reason = format!("status {status}");
                        tracing::debug!(attempt, %status, url, "transient failure, will retry");
                        continue;
                    }
                    if !status.is_success() {
                        let body = response.text().await.unwrap_or_default();
                        return Err(GatewayError::RequestRejected {
                            status: status.as_u16(),
                            body: body.chars().take(200).collect(),
                        });
                    }
                    let payload: serde_json::Value = response
                        .json()
                        .await
                        .map_err(|e| GatewayError::Protocol(format!("decoding response: {e}")))?;
                    return parse_completion(&payload);
                }
                Err(e) => {
                    last_reason = e.to_string();
                    tracing::debug!(attempt, error = %e, url, "transport failure, will retry");
                }
            }
        }
        Err(GatewayError::EndpointUnreachable {
            attempts: endpoint.max_retries + 1,
            reason: last_reason,
        })
    }

    /// Completes a batch with at most `parallelism` requests in flight,
    /// returning per-request outcomes positionally aligned with the input.
    /// One failing request does not poison its neighbors.
    pub async fn complete_batch(
        &self,
        endpoint: &EndpointConfig,
        requests: &[CompletionRequest],
        parallelism: usize,
    ) -> Vec<Result<CompletionResult, GatewayError>> {
        stream::iter(requests)
            .map(|request| self.complete(endpoint, request))
            .buffered(parallelism.max(1))
            .collect()
            .await
    }
}

fn parse_completion(payload: &serde_json::Value) -> Result<CompletionResult, GatewayError> {
    let choice = payload
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("response carries no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|t| t.as_str())
        .unwrap_or_default()
        .to_string();
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyResponse);
    }
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Error,
    };
    let usage = TokenUsage {
        prompt_tokens: payload.pointer("/usage/prompt_tokens").and_then(|v| v.as_u64()).unwrap_or(0),
        completion_tokens: payload
            .pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
        total_tokens: payload.pointer("/usage/total_tokens").and_then(|v| v.as_u64()).unwrap_or(0),
    };
    Ok(CompletionResult { text, finish_reason, usage, cached: false })
}
