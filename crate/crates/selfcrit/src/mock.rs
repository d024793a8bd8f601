//! Scriptable in-process chat-completions server for offline testing.
//!
//! Tests describe behavior as an ordered rule list: the first rule whose
//! matcher accepts a request serves its next scripted step (the last step
//! repeats once the script is exhausted), which lets a test express flows
//! like "429 twice, then succeed". The server records every request and
//! tracks total hits plus the highest number of requests in flight at once,
//! so tests can assert on retry counts, cache behavior, and parallelism
//! bounds.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use serde::Serialize;

/// All conditions must hold for a rule to match. An empty matcher matches
/// everything, which makes a trailing catch-all rule easy to write.
#[derive(Debug, Clone, Default)]
pub struct MockMatcher {
    pub prompt_contains: Vec<String>,
    pub seed: Option<u64>,
}

impl MockMatcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn prompt(needle: impl Into<String>) -> Self {
        Self { prompt_contains: vec![needle.into()], seed: None }
    }

    pub fn and_prompt(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains.push(needle.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn matches(&self, request: &RecordedRequest) -> bool {
        self.prompt_contains.iter().all(|needle| request.prompt.contains(needle))
            && self.seed.is_none_or(|seed| request.seed == Some(seed))
    }
}

/// One scripted response: an HTTP status, the completion text for 2xx
/// statuses, and an optional artificial service delay.
#[derive(Debug, Clone)]
pub struct MockStep {
    pub status: u16,
    pub text: String,
    pub finish_reason: &'static str,
    pub delay_ms: u64,
}

impl MockStep {
    pub fn text(text: impl Into<String>) -> Self {
        Self { status: 200, text: text.into(), finish_reason: "stop", delay_ms: 0 }
    }

    pub fn status(status: u16) -> Self {
        Self { status, text: String::new(), finish_reason: "stop", delay_ms: 0 }
    }

    pub fn empty() -> Self {
        Self { status: 200, text: String::new(), finish_reason: "stop", delay_ms: 0 }
    }

    pub fn truncated(text: impl Into<String>) -> Self {
        Self { status: 200, text: text.into(), finish_reason: "length", delay_ms: 0 }
    }

    pub fn with_delay_ms(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

pub struct MockRule {
    pub name: String,
    pub matcher: MockMatcher,
    pub steps: Vec<MockStep>,
    hits: AtomicUsize,
}

impl MockRule {
    pub fn new(name: impl Into<String>, matcher: MockMatcher, steps: Vec<MockStep>) -> Self {
        assert!(!steps.is_empty(), "mock rule needs at least one step");
        Self { name: name.into(), matcher, steps, hits: AtomicUsize::new(0) }
    }

    /// Shorthand for a rule that always answers with the same completion.
    pub fn reply(name: impl Into<String>, matcher: MockMatcher, text: impl Into<String>) -> Self {
        Self::new(name, matcher, vec![MockStep::text(text)])
    }
}

/// What the server saw in one request body.
#[derive(Debug, Clone, Serialize)]
pub struct RecordedRequest {
    pub prompt: String,
    pub model: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u64>,
    pub seed: Option<u64>,
}

struct MockState {
    rules: Vec<MockRule>,
    log: Mutex<Vec<RecordedRequest>>,
    total: AtomicU64,
    in_flight: AtomicU32,
    max_in_flight: AtomicU32,
}

/// Handle to a running mock server; dropping it shuts the server down.
pub struct MockLlm {
    addr: SocketAddr,
    state: Arc<MockState>,
    handle: tokio::task::JoinHandle<()>,
}

impl Drop for MockLlm {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

impl MockLlm {
    pub async fn spawn(rules: Vec<MockRule>) -> Self {
        let state = Arc::new(MockState {
            rules,
            log: Mutex::new(Vec::new()),
            total: AtomicU64::new(0),
            in_flight: AtomicU32::new(0),
            max_in_flight: AtomicU32::new(0),
        });
        let router = Router::new()
            .route("/v1/chat/completions", post(handle_completion))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind mock server");
        let addr = listener.local_addr().expect("mock server addr");
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, router).await;
        });
        Self { addr, state, handle }
    }

    /// Base URL in the shape endpoint configs expect, `/v1` included.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn total_requests(&self) -> u64 {
        self.state.total.load(Ordering::SeqCst)
    }

    pub fn max_concurrency(&self) -> u32 {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn hits(&self, rule_name: &str) -> usize {
        self.state
            .rules
            .iter()
            .find(|rule| rule.name == rule_name)
            .map(|rule| rule.hits.load(Ordering::SeqCst))
            .unwrap_or(0)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().unwrap().clone()
    }
}

struct InFlightGuard(Arc<MockState>);

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn handle_completion(
    State(state): State<Arc<MockState>>,
    Json(body): Json<serde_json::Value>,
) -> impl IntoResponse {
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(current, Ordering::SeqCst);
    let _guard = InFlightGuard(state.clone());
    state.total.fetch_add(1, Ordering::SeqCst);

    let request = RecordedRequest {
        prompt: body
            .pointer("/messages/0/content")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        model: body.get("model").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
        temperature: body.get("temperature").and_then(|v| v.as_f64()),
        max_tokens: body.get("max_tokens").and_then(|v| v.as_u64()),
        seed: body.get("seed").and_then(|v| v.as_u64()),
    };
    state.log.lock().unwrap().push(request.clone());

    let Some(rule) = state.rules.iter().find(|rule| rule.matcher.matches(&request)) else {
        return (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(serde_json::json!({"error": "mock: no rule matched request"})),
        );
    };
    let hit = rule.hits.fetch_add(1, Ordering::SeqCst);
    let step = &rule.steps[hit.min(rule.steps.len() - 1)];
    if step.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(step.delay_ms)).await;
    }
    if !(200..300).contains(&step.status) {
        return (
            StatusCode::from_u16(step.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(serde_json::json!({"error": format!("mock: scripted status {}", step.status)})),
        );
    }
    let completion_tokens = step.text.split_whitespace().count() as u64;
    (
        StatusCode::OK,
        Json(serde_json::json!({
            "id": "mock-completion",
            "object": "chat.completion",
            "model": request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": step.text},
                "finish_reason": step.finish_reason,
            }],
            "usage": {
                "prompt_tokens": request.prompt.split_whitespace().count() as u64,
                "completion_tokens": completion_tokens,
                "total_tokens": request.prompt.split_whitespace().count() as u64 + completion_tokens,
            }
        })),
    )
}
