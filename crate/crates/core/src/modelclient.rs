//! Endpoint access: chat completion, moderation scores, and embeddings over
//! an OpenAI-compatible wire shape, with bounded retries, per-endpoint rate
//! limiting, and an injectable clock so both are testable without wall time.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::guideline::PromptInstance;

const WINDOW_MS: u64 = 60_000;

/// Monotonic time source. The virtual implementation advances instantly on
/// sleep, letting backoff and rate-limit behavior run deterministically in
/// tests.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep_ms(&self, ms: u64);
}

pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

/// Test clock: `sleep_ms` advances shared virtual time and returns at once.
#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<u64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        *self.now.lock().unwrap()
    }

    fn sleep_ms(&self, ms: u64) {
        *self.now.lock().unwrap() += ms;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Chat,
    Moderation,
    Embedding,
}

/// Role used for the single prompt message.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    #[default]
    User,
    System,
}

impl PromptRole {
    fn as_str(self) -> &'static str {
        match self {
            PromptRole::User => "user",
            PromptRole::System => "system",
        }
    }
}

/// Greedy-decoding defaults: temperature 0, top_p 1, 100 max tokens, both
/// penalties 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_top_p")]
    pub top_p: f64,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub frequency_penalty: f64,
    #[serde(default)]
    pub presence_penalty: f64,
}

fn d_temperature() -> f64 {
    0.0
}
fn d_top_p() -> f64 {
    1.0
}
fn d_max_tokens() -> u32 {
    100
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 100,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
        }
    }
}

/// Retry schedule: exponential backoff (base 1s, cap 60s) with optional
/// jitter, at most `max_attempts` dispatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "d_attempts")]
    pub max_attempts: u32,
    #[serde(default = "d_base_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "d_max_delay")]
    pub max_delay_ms: u64,
    #[serde(default = "d_jitter")]
    pub jitter: bool,
}

fn d_attempts() -> u32 {
    5
}
fn d_base_delay() -> u64 {
    1_000
}
fn d_max_delay() -> u64 {
    60_000
}
fn d_jitter() -> bool {
    true
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1_000,
            max_delay_ms: 60_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before the attempt following failure number `failures` (1-based).
    fn delay_ms(&self, failures: u32) -> u64 {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (failures - 1).min(30));
        let capped = exp.min(self.max_delay_ms);
        if self.jitter && capped > 1 {
            use rand::Rng;
            let half = capped / 2;
            half + rand::rng().random_range(0..=capped - half)
        } else {
            capped
        }
    }
}

/// One logical model endpoint. `endpoint_id` is the registry key; `model` is
/// the wire model name. Secrets are referenced by env-var name only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub endpoint_id: String,
    pub kind: EndpointKind,
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub prompt_role: PromptRole,
    /// Requests per minute; `None` means unlimited.
    #[serde(default)]
    pub rate_limit: Option<u32>,
    #[serde(default = "d_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Embedding batch size; `None` sends everything in one request.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

fn d_timeout() -> u64 {
    30_000
}

impl EndpointConfig {
    /// Minimal chat config used widely in tests and demos.
    pub fn chat(endpoint_id: &str, base_url: &str, model: &str) -> Self {
        EndpointConfig {
            endpoint_id: endpoint_id.to_owned(),
            kind: EndpointKind::Chat,
            base_url: base_url.to_owned(),
            model: model.to_owned(),
            auth_env: None,
            decoding: DecodingParams::default(),
            prompt_role: PromptRole::default(),
            rate_limit: None,
            timeout_ms: d_timeout(),
            retry: RetryPolicy::default(),
            batch_size: None,
        }
    }
}

/// Completion with capture metadata. `attempt_count` includes the successful
/// dispatch, so it is always >= 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub endpoint_id: String,
    pub attempt_count: u32,
}

/// Per-category scores in [0, 1] from a moderation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: BTreeMap<String, f64>,
}

/// Which side of the threshold maps to 1 when the score equals it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdBoundary {
    #[default]
    Inclusive,
    Exclusive,
}

/// Maps each score to 1 iff `score >= threshold` (boundary inclusive).
pub fn binarize_scores(v: &ScoreVector, threshold: f64) -> BTreeMap<String, u32> {
    binarize_scores_with(v, threshold, ThresholdBoundary::Inclusive)
}

pub fn binarize_scores_with(
    v: &ScoreVector,
    threshold: f64,
    boundary: ThresholdBoundary,
) -> BTreeMap<String, u32> {
    debug_assert!((0.0..=1.0).contains(&threshold));
    v.scores
        .iter()
        .map(|(k, &s)| {
            let hit = match boundary {
                ThresholdBoundary::Inclusive => s >= threshold,
                ThresholdBoundary::Exclusive => s > threshold,
            };
            (k.clone(), u32::from(hit))
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("retries exhausted after {attempts} attempts: {last_error}")]
    ExhaustedRetries { attempts: u32, last_error: String },
    #[error("authentication failed: {message}")]
    AuthError { message: String },
    #[error("malformed response: {message}")]
    MalformedResponse { message: String },
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("embedding {index}: dimension {found}, expected {expected}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        index: usize,
    },
    #[error("operation needs a {expected:?} endpoint, `{endpoint_id}` is {actual:?}")]
    KindMismatch {
        expected: EndpointKind,
        actual: EndpointKind,
        endpoint_id: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Narrow completion interface used where only text-in/text-out access is
/// needed (definition generation, mocks).
pub trait TextCompletion: Send + Sync {
    fn complete_text(&self, prompt: &str) -> Result<ModelResponse, ClientError>;
    fn endpoint_id(&self) -> &str;
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub url: String,
    pub bearer: Option<String>,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Transport-level failure (connection or timeout), always retryable.
#[derive(Debug, Clone, Error)]
#[error("transport: {message}")]
pub struct TransportError {
    pub message: String,
    pub timeout: bool,
}

pub trait Transport: Send + Sync {
    fn execute(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Real HTTP transport (blocking).
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout_ms: u64) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build();
        UreqTransport { agent: config.into() }
    }
}

impl Transport for UreqTransport {
    fn execute(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = self.agent.post(&req.url);
        if let Some(token) = &req.bearer {
            builder = builder.header("Authorization", &format!("Bearer {token}"));
        }
        match builder.send_json(&req.body) {
            Ok(mut res) => {
                let status = res.status().as_u16();
                let body = res
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| TransportError {
                        message: format!("reading body: {e}"),
                        timeout: false,
                    })?;
                Ok(HttpResponse { status, body })
            }
            Err(e) => Err(TransportError {
                timeout: matches!(e, ureq::Error::Timeout(_)),
                message: e.to_string(),
            }),
        }
    }
}

/// Offline transport for `static:<text>` base URLs: answers every chat
/// request with `<text>` as the completion.
pub struct StaticResponder {
    completion: String,
}

impl StaticResponder {
    pub fn new(completion: &str) -> Self {
        StaticResponder { completion: completion.to_owned() }
    }
}

impl Transport for StaticResponder {
    fn execute(&self, _req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": self.completion}}]
        });
        Ok(HttpResponse { status: 200, body: body.to_string() })
    }
}

pub mod script {
    //! Scripted transport for tests: plays back a fixed failure/success
    //! sequence with a repeating fallback, counting dispatches.

    use super::*;

    #[derive(Debug, Clone)]
    pub enum Step {
        /// 200 with a chat-shaped body carrying this completion.
        ChatOk(String),
        /// 200 with this raw JSON body.
        Json(serde_json::Value),
        /// Arbitrary status with raw body.
        Status(u16, String),
        Timeout,
        Network(String),
    }

    pub struct ScriptedTransport {
        steps: Mutex<VecDeque<Step>>,
        fallback: Option<Step>,
        calls: AtomicU32,
        requests: Mutex<Vec<HttpRequest>>,
    }

    impl ScriptedTransport {
        pub fn new(steps: Vec<Step>) -> Self {
            ScriptedTransport {
                steps: Mutex::new(steps.into()),
                fallback: None,
                calls: AtomicU32::new(0),
                requests: Mutex::new(Vec::new()),
            }
        }

        /// Plays `steps` first, then `fallback` forever.
        pub fn with_fallback(steps: Vec<Step>, fallback: Step) -> Self {
            let mut t = Self::new(steps);
            t.fallback = Some(fallback);
            t
        }

        /// Answers every request the same way.
        pub fn repeating(step: Step) -> Self {
            Self::with_fallback(Vec::new(), step)
        }

        pub fn calls(&self) -> u32 {
            self.calls.load(Ordering::SeqCst)
        }

        /// Captured request bodies, in dispatch order.
        pub fn requests(&self) -> Vec<HttpRequest> {
            self.requests.lock().unwrap().clone()
        }
    }

    impl Transport for ScriptedTransport {
        fn execute(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.requests.lock().unwrap().push(req.clone());
            let step = self
                .steps
                .lock()
                .unwrap()
                .pop_front()
                .or_else(|| self.fallback.clone())
                .expect("script exhausted with no fallback");
            match step {
                Step::ChatOk(text) => Ok(HttpResponse {
                    status: 200,
                    body: json!({
                        "choices": [{"message": {"role": "assistant", "content": text}}]
                    })
                    .to_string(),
                }),
                Step::Json(v) => Ok(HttpResponse { status: 200, body: v.to_string() }),
                Step::Status(status, body) => Ok(HttpResponse { status, body }),
                Step::Timeout => Err(TransportError {
                    message: "simulated timeout".into(),
                    timeout: true,
                }),
                Step::Network(message) => Err(TransportError { message, timeout: false }),
            }
        }
    }
}

struct RateLimiter {
    limit: u32,
    dispatched: Mutex<VecDeque<u64>>,
}

impl RateLimiter {
    fn new(limit: u32) -> Self {
        RateLimiter { limit, dispatched: Mutex::new(VecDeque::new()) }
    }

    /// Blocks (via the clock) until a dispatch slot is free, then records the
    /// dispatch. Guarantee: at most `limit` recorded dispatches in any
    /// half-open window `[t, t + 60s)`.
    fn acquire(&self, clock: &dyn Clock) {
        loop {
            let wait = {
                let now = clock.now_ms();
                let mut window = self.dispatched.lock().unwrap();
                while window.front().is_some_and(|&t| t + WINDOW_MS <= now) {
                    window.pop_front();
                }
                if (window.len() as u32) < self.limit {
                    window.push_back(now);
                    return;
                }
                window[0] + WINDOW_MS - now
            };
            clock.sleep_ms(wait.max(1));
        }
    }
}

/// Client for one configured endpoint. Shareable across threads; the rate
/// limiter is the only synchronized state.
pub struct EndpointClient {
    cfg: EndpointConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    limiter: Option<RateLimiter>,
    audit: Option<Mutex<fs::File>>,
}

impl EndpointClient {
    /// Builds a client with the real clock. `static:<text>` base URLs get an
    /// offline transport; anything else goes over HTTP.
    pub fn new(cfg: EndpointConfig) -> Self {
        let transport: Arc<dyn Transport> = match cfg.base_url.strip_prefix("static:") {
            Some(text) => Arc::new(StaticResponder::new(text)),
            None => Arc::new(UreqTransport::new(cfg.timeout_ms)),
        };
        Self::with_parts(cfg, transport, Arc::new(SystemClock::new()))
    }

    /// Injectable transport and clock, the seam tests use.
    pub fn with_parts(
        cfg: EndpointConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let limiter = cfg.rate_limit.map(RateLimiter::new);
        EndpointClient { cfg, transport, clock, limiter, audit: None }
    }

    /// Mirrors every request/response pair to `path` as JSON lines.
    pub fn with_audit_log(mut self, path: &Path) -> Result<Self, ClientError> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.audit = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn require_kind(&self, expected: EndpointKind) -> Result<(), ClientError> {
        if self.cfg.kind != expected {
            return Err(ClientError::KindMismatch {
                expected,
                actual: self.cfg.kind,
                endpoint_id: self.cfg.endpoint_id.clone(),
            });
        }
        Ok(())
    }

    fn bearer(&self) -> Result<Option<String>, ClientError> {
        match &self.cfg.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(token) if !token.is_empty() => Ok(Some(token)),
                _ => Err(ClientError::AuthError {
                    message: format!("env var `{var}` is unset or empty"),
                }),
            },
        }
    }

    fn endpoint_url(&self, suffix: &str) -> String {
        format!("{}/{suffix}", self.cfg.base_url.trim_end_matches('/'))
    }

    fn audit_line(&self, req: &HttpRequest, outcome: &str) {
        if let Some(audit) = &self.audit {
            let line = json!({
                "at_ms": self.clock.now_ms(),
                "endpoint_id": self.cfg.endpoint_id,
                "url": req.url,
                "request": req.body,
                "outcome": outcome,
            });
            let mut file = audit.lock().unwrap();
            let _ = writeln!(file, "{line}");
        }
    }

    /// Dispatches with rate limiting and retry on 429/5xx/transport errors.
    /// Returns the successful response and the number of attempts spent.
    fn dispatch(&self, req: &HttpRequest) -> Result<(HttpResponse, u32), ClientError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            let failure: String = match self.transport.execute(req) {
                Ok(res) if (200..300).contains(&res.status) => {
                    self.audit_line(req, &format!("status {}", res.status));
                    return Ok((res, attempt));
                }
                Ok(res) if res.status == 401 || res.status == 403 => {
                    self.audit_line(req, &format!("status {}", res.status));
                    return Err(ClientError::AuthError {
                        message: format!("status {}: {}", res.status, res.body),
                    });
                }
                Ok(res) if res.status == 429 || (500..600).contains(&res.status) => {
                    self.audit_line(req, &format!("status {}", res.status));
                    format!("status {}", res.status)
                }
                Ok(res) => {
                    self.audit_line(req, &format!("status {}", res.status));
                    return Err(ClientError::Endpoint { status: res.status, body: res.body });
                }
                Err(te) => {
                    self.audit_line(req, &format!("transport error: {te}"));
                    te.to_string()
                }
            };
            if attempt >= self.cfg.retry.max_attempts {
                return Err(ClientError::ExhaustedRetries { attempts: attempt, last_error: failure });
            }
            self.clock.sleep_ms(self.cfg.retry.delay_ms(attempt));
        }
    }

    /// Sends a compiled prompt as one message and captures the completion.
    pub fn complete(&self, prompt: &PromptInstance) -> Result<ModelResponse, ClientError> {
        self.complete_text(&prompt.text)
    }

    /// Same as [`EndpointClient::complete`] for raw prompt text.
    pub fn complete_text(&self, text: &str) -> Result<ModelResponse, ClientError> {
        self.require_kind(EndpointKind::Chat)?;
        let started = self.clock.now_ms();
        let req = HttpRequest {
            url: self.endpoint_url("chat/completions"),
            bearer: self.bearer()?,
            body: json!({
                "model": self.cfg.model,
                "messages": [{"role": self.cfg.prompt_role.as_str(), "content": text}],
                "temperature": self.cfg.decoding.temperature,
                "top_p": self.cfg.decoding.top_p,
                "max_tokens": self.cfg.decoding.max_tokens,
                "frequency_penalty": self.cfg.decoding.frequency_penalty,
                "presence_penalty": self.cfg.decoding.presence_penalty,
            }),
        };
        let (res, attempt_count) = self.dispatch(&req)?;
        let parsed: serde_json::Value =
            serde_json::from_str(&res.body).map_err(|e| ClientError::MalformedResponse {
                message: format!("invalid JSON: {e}"),
            })?;
        let raw_text = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ClientError::MalformedResponse {
                message: "missing choices[0].message.content".into(),
            })?
            .to_owned();
        Ok(ModelResponse {
            raw_text,
            latency_ms: self.clock.now_ms() - started,
            endpoint_id: self.cfg.endpoint_id.clone(),
            attempt_count,
        })
    }

    /// Fetches per-category scores for `content`.
    pub fn moderate(&self, content: &str) -> Result<ScoreVector, ClientError> {
        self.require_kind(EndpointKind::Moderation)?;
        let req = HttpRequest {
            url: self.endpoint_url("moderations"),
            bearer: self.bearer()?,
            body: json!({"model": self.cfg.model, "input": content}),
        };
        let (res, _) = self.dispatch(&req)?;
        let parsed: serde_json::Value =
            serde_json::from_str(&res.body).map_err(|e| ClientError::MalformedResponse {
                message: format!("invalid JSON: {e}"),
            })?;
        let raw = parsed["results"][0]["category_scores"].as_object().ok_or_else(|| {
            ClientError::MalformedResponse {
                message: "missing results[0].category_scores".into(),
            }
        })?;
        let mut scores = BTreeMap::new();
        for (name, value) in raw {
            let s = value.as_f64().ok_or_else(|| ClientError::MalformedResponse {
                message: format!("score `{name}` is not a number"),
            })?;
            if !(0.0..=1.0).contains(&s) {
                return Err(ClientError::MalformedResponse {
                    message: format!("score `{name}` = {s} outside [0, 1]"),
                });
            }
            scores.insert(name.clone(), s);
        }
        Ok(ScoreVector { scores })
    }

    /// Embeds `texts`, batched per config, output order aligned with input.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClientError> {
        self.require_kind(EndpointKind::Embedding)?;
        let batch = self.cfg.batch_size.unwrap_or(usize::MAX).max(1);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(batch) {
            let req = HttpRequest {
                url: self.endpoint_url("embeddings"),
                bearer: self.bearer()?,
                body: json!({"model": self.cfg.model, "input": chunk}),
            };
            let (res, _) = self.dispatch(&req)?;
            let parsed: serde_json::Value =
                serde_json::from_str(&res.body).map_err(|e| ClientError::MalformedResponse {
                    message: format!("invalid JSON: {e}"),
                })?;
            let data = parsed["data"].as_array().ok_or_else(|| {
                ClientError::MalformedResponse { message: "missing data array".into() }
            })?;
            if data.len() != chunk.len() {
                return Err(ClientError::MalformedResponse {
                    message: format!("asked for {} embeddings, got {}", chunk.len(), data.len()),
                });
            }
            for item in data {
                let vector = item["embedding"]
                    .as_array()
                    .ok_or_else(|| ClientError::MalformedResponse {
                        message: "missing embedding array".into(),
                    })?
                    .iter()
                    .map(|v| {
                        v.as_f64().ok_or_else(|| ClientError::MalformedResponse {
                            message: "non-numeric embedding component".into(),
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                out.push(vector);
            }
        }
        if let Some(first) = out.first() {
            let expected = first.len();
            for (index, v) in out.iter().enumerate() {
                if v.len() != expected {
                    return Err(ClientError::DimensionMismatch {
                        expected,
                        found: v.len(),
                        index,
                    });
                }
            }
        }
        Ok(out)
    }
}

impl TextCompletion for EndpointClient {
    fn complete_text(&self, prompt: &str) -> Result<ModelResponse, ClientError> {
        EndpointClient::complete_text(self, prompt)
    }

    fn endpoint_id(&self) -> &str {
        &self.cfg.endpoint_id
    }
}
