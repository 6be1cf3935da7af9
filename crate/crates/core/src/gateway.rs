//! Uniform client for the multimodal model behind every pipeline stage.
//!
//! [`Gateway`] wraps a [`ModelBackend`] with retry, admission rate limiting
//! and an optional request log. It never interprets the reply; parsing is
//! the job of the stage that asked.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;

use crate::digest::json_digest;
use crate::model::{sniff_image_format, ImageRef};
use crate::prompt::{RenderedPrompt, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Extract,
    QueryFormulate,
    AttributeAnswer,
    Verify,
    SelfCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub prompt: RenderedPrompt,
    pub decode_params: DecodeParams,
    pub purpose: Purpose,
    /// Bumped when a stage re-asks after an unusable reply, so that the
    /// second ask is a distinct request for caches and fixtures.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub retry_round: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Serialize)]
struct RequestKey<'a> {
    template: TemplateId,
    system: &'a str,
    user: &'a str,
    images: Vec<&'a str>,
    temperature: f64,
    max_output_tokens: u32,
    retry_round: u32,
}

impl ModelRequest {
    pub fn new(prompt: RenderedPrompt, purpose: Purpose, decode_params: DecodeParams) -> Self {
        ModelRequest {
            prompt,
            decode_params,
            purpose,
            retry_round: 0,
        }
    }

    /// Content digest of the request. Images contribute their content digest
    /// only, never their location.
    pub fn digest(&self) -> String {
        json_digest(&RequestKey {
            template: self.prompt.template,
            system: &self.prompt.system,
            user: &self.prompt.user,
            images: self.prompt.attachments.iter().map(|i| i.digest.as_str()).collect(),
            temperature: self.decode_params.temperature,
            max_output_tokens: self.decode_params.max_output_tokens,
            retry_round: self.retry_round,
        })
    }

    pub fn is_deterministic(&self) -> bool {
        self.decode_params.temperature == 0.0
    }

    fn validate(&self) -> Result<(), GatewayError> {
        let t = self.decode_params.temperature;
        if !t.is_finite() || t < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature {t}")));
        }
        if self.decode_params.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// Outcome of a single backend attempt.
#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("payload too large: {0}")]
    PayloadTooLarge(String),
    #[error("rejected: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("payload too large: {0}")]
    PayloadTooLarge(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(String),
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn generate(&self, request: &ModelRequest) -> Result<String, BackendError>;
}

/// What pipeline stages call. Implemented by [`Gateway`] and by wrappers
/// that add caching or tracing.
#[async_trait]
pub trait ModelService: Send + Sync {
    async fn complete(&self, request: ModelRequest) -> Result<ModelResponse, GatewayError>;
    fn backend_id(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    /// Relative jitter applied to each delay, e.g. 0.1 for ±10%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            jitter: 0.1,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, `attempt` counting from 1:
    /// base, 2x base, 4x base, ...
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * 2f64.powi(attempt.saturating_sub(1) as i32);
        let factor = if self.jitter > 0.0 {
            1.0 + rand::rng().random_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * factor).max(0.0))
    }
}

/// Token bucket over requests per minute. Callers queue on a mutex, so
/// admission is serialized while execution overlaps freely.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: tokio::sync::Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        Self::with_burst(requests, 1)
    }

    pub fn with_burst(requests_per_minute: u32, burst: u32) -> Self {
        let capacity = burst.max(1) as f64;
        RateLimiter {
            per_second: requests_per_minute.max(1) as f64 / 60.0,
            capacity,
            state: tokio::sync::Mutex::new((capacity, Instant::now())),
        }
    }

    pub async fn acquire(&self) {
        let mut state = self.state.lock().await;
        loop {
            let now = Instant::now();
            let (tokens, last) = *state;
            let refilled = (tokens + now.duration_since(last).as_secs_f64() * self.per_second).min(self.capacity);
            if refilled >= 1.0 {
                *state = (refilled - 1.0, now);
                return;
            }
            *state = (refilled, now);
            let wait = (1.0 - refilled) / self.per_second;
            tokio::time::sleep(Duration::from_secs_f64(wait)).await;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggedRequest {
    pub digest: String,
    pub request: ModelRequest,
}

/// Audit log holding every request byte-for-byte.
#[derive(Debug, Default)]
pub struct RequestLog {
    entries: Mutex<Vec<LoggedRequest>>,
}

impl RequestLog {
    pub fn entries(&self) -> Vec<LoggedRequest> {
        self.entries.lock().expect("log lock").clone()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for e in self.entries.lock().expect("log lock").iter() {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    log: Option<Arc<RequestLog>>,
    invocations: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            limiter: None,
            log: None,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::per_minute(requests_per_minute));
        self
    }

    pub fn with_log(mut self, log: Arc<RequestLog>) -> Self {
        self.log = Some(log);
        self
    }

    /// Number of backend attempts made so far, retries included.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    pub async fn complete(&self, request: ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        if let Some(log) = &self.log {
            log.entries.lock().expect("log lock").push(LoggedRequest {
                digest: request.digest(),
                request: request.clone(),
            });
        }
        let started = Instant::now();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire().await;
            }
            self.invocations.fetch_add(1, Ordering::SeqCst);
            match self.backend.generate(&request).await {
                Ok(text) => {
                    return Ok(ModelResponse {
                        text: text.trim_end().to_string(),
                        backend_id: self.backend.id().to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Err(BackendError::Auth(m)) => return Err(GatewayError::AuthFailure(m)),
                Err(BackendError::PayloadTooLarge(m)) => return Err(GatewayError::PayloadTooLarge(m)),
                Err(BackendError::Rejected(m)) => return Err(GatewayError::Rejected(m)),
                Err(BackendError::Transient(m)) if attempt >= max => {
                    return Err(GatewayError::BackendUnavailable { attempts: attempt, last: m })
                }
                Err(BackendError::Transient(_)) => {
                    tokio::time::sleep(self.retry.delay_after(attempt)).await;
                }
            }
        }
    }
}

#[async_trait]
impl ModelService for Gateway {
    async fn complete(&self, request: ModelRequest) -> Result<ModelResponse, GatewayError> {
        Gateway::complete(self, request).await
    }

    fn backend_id(&self) -> &str {
        self.backend.id()
    }
}

/// Replays pinned replies keyed by [`ModelRequest::digest`]. On disk the
/// fixtures are `<digest>.txt` files in one directory.
#[derive(Debug, Default)]
pub struct MockBackend {
    replies: HashMap<String, String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut replies = HashMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                replies.insert(stem.to_string(), std::fs::read_to_string(&path)?);
            }
        }
        Ok(MockBackend { replies })
    }

    pub fn insert(&mut self, request: &ModelRequest, reply: impl Into<String>) {
        self.replies.insert(request.digest(), reply.into());
    }

    pub fn insert_digest(&mut self, digest: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert(digest.into(), reply.into());
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

#[async_trait]
impl ModelBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    async fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let digest = request.digest();
        self.replies
            .get(&digest)
            .cloned()
            .ok_or_else(|| BackendError::Rejected(format!("no mock fixture for request {digest}")))
    }
}

#[derive(Debug, Clone)]
pub struct LiveModelConfig {
    /// Full URL of an OpenAI-compatible chat completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: String,
    /// Base directory for relative image paths.
    pub image_root: Option<PathBuf>,
    pub timeout: Duration,
}

/// HTTPS client for chat-completion style multimodal endpoints.
pub struct LiveModelBackend {
    config: LiveModelConfig,
    client: reqwest::Client,
    id: String,
}

impl LiveModelBackend {
    pub fn new(config: LiveModelConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let id = format!("live:{}", config.model);
        Ok(LiveModelBackend { config, client, id })
    }

    fn image_url(&self, image: &ImageRef) -> Result<String, BackendError> {
        if image.is_remote() {
            return Ok(image.location.clone());
        }
        let path = image
            .local_path(self.config.image_root.as_deref())
            .expect("local image has a path");
        let bytes = std::fs::read(&path).map_err(|e| BackendError::Rejected(format!("{}: {e}", path.display())))?;
        let format = sniff_image_format(&bytes)
            .ok_or_else(|| BackendError::Rejected(format!("{} is not a recognized image", path.display())))?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
        Ok(format!("data:{};base64,{b64}", format.mime()))
    }

    fn body(&self, request: &ModelRequest) -> Result<serde_json::Value, BackendError> {
        let mut content = vec![serde_json::json!({"type": "text", "text": request.prompt.user})];
        for image in &request.prompt.attachments {
            content.push(serde_json::json!({"type": "image_url", "image_url": {"url": self.image_url(image)?}}));
        }
        Ok(serde_json::json!({
            "model": self.config.model,
            "temperature": request.decode_params.temperature,
            "max_tokens": request.decode_params.max_output_tokens,
            "messages": [
                {"role": "system", "content": request.prompt.system},
                {"role": "user", "content": content},
            ],
        }))
    }
}

#[async_trait]
impl ModelBackend for LiveModelBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let body = self.body(request)?;
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .await
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transient(e.to_string()))?;
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("{status}: {text}"))),
            413 => return Err(BackendError::PayloadTooLarge(text)),
            408 | 429 | 500..=599 => return Err(BackendError::Transient(format!("{status}: {text}"))),
            _ => return Err(BackendError::Rejected(format!("{status}: {text}"))),
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Rejected(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Rejected("response has no choices[0].message.content".into()))
    }
}
