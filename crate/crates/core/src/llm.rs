//! Multimodal chat backends.
//!
//! [`ChatBackend`] is the single seam between the agent loop and a model.
//! Implementations:
//!
//! - [`RemoteBackend`]: JSON chat-completion over HTTPS with base64 images,
//!   bounded retries and a bounded number of in-flight requests.
//! - [`ScriptedBackend`]: canned responses consumed in order, for tests.
//! - [`FnBackend`]: responses computed by a closure, for tests.
//! - [`RecordingBackend`] / [`ReplayBackend`]: content-addressed session
//!   files (JSONL of `{digest, response}`) for deterministic reruns.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ImageData;

pub const DEFAULT_API_KEY_ENV: &str = "GUI_AGENT_API_KEY";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    /// Raw screenshot first, tagged screenshot second, when present.
    pub images: Vec<ImageData>,
    pub decode: DecodeParams,
}

impl ChatRequest {
    pub fn text_only(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            images: Vec::new(),
            decode: DecodeParams::default(),
        }
    }

    /// Content address of the request: SHA-256 over the system text, user
    /// text, image bytes and decode parameters, each length-prefixed.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"screennav-request-v1");
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(self.system_text.as_bytes());
        field(self.user_text.as_bytes());
        field(&(self.images.len() as u64).to_le_bytes());
        for img in &self.images {
            field(img.as_bytes());
        }
        field(&self.decode.temperature.to_bits().to_le_bytes());
        field(&self.decode.max_tokens.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("transient failure after {attempts} attempt(s): {message}")]
    Transient { attempts: u32, message: String },
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script exhausted after {consumed} response(s)")]
    ScriptExhausted { consumed: usize },
    #[error("script entry {index} expects user text containing {expected:?} with {images:?} image(s); got {got_images} image(s): {got_head:?}")]
    ScriptMismatch {
        index: usize,
        expected: String,
        images: Option<usize>,
        got_images: usize,
        got_head: String,
    },
    #[error("no recorded response for digest {digest}; nearest recorded: {nearest:?}")]
    ReplayMiss { digest: String, nearest: Option<String> },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("session io: {0}")]
    Io(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::RateLimited { .. } | BackendError::Transient { .. })
    }
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(req)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(req)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(req)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InflightLimiter {
    limit: usize,
    state: Mutex<LimiterState>,
    cv: Condvar,
}

#[derive(Debug, Default)]
struct LimiterState {
    active: usize,
    peak: usize,
}

pub struct Permit<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().unwrap_or_else(|e| e.into_inner());
        st.active -= 1;
        drop(st);
        self.limiter.cv.notify_one();
    }
}

impl InflightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(LimiterState::default()),
            cv: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.active >= self.limit {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.active += 1;
        st.peak = st.peak.max(st.active);
        Permit { limiter: self }
    }

    /// Highest number of permits held at once so far.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).peak
    }
}

/// Backend wrapper that enforces an in-flight bound on any inner backend.
pub struct Limited<B> {
    inner: B,
    limiter: InflightLimiter,
}

impl<B: ChatBackend> Limited<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limiter: InflightLimiter::new(limit),
        }
    }

    pub fn limiter(&self) -> &InflightLimiter {
        &self.limiter
    }
}

impl<B: ChatBackend> ChatBackend for Limited<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self.limiter.acquire();
        self.inner.complete(req)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Extra random delay as a fraction of the exponential delay.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based count of failures so far).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16));
        let capped = exp.min(self.max_delay);
        let jitter = if self.jitter > 0.0 {
            rand::rng().random_range(0.0..=self.jitter)
        } else {
            0.0
        };
        capped.mul_f64(1.0 + jitter)
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, BackendError>,
        mut sleep: impl FnMut(Duration),
    ) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    tracing::warn!(attempt, error = %e, "retrying backend request");
                    sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(BackendError::RateLimited { .. }) => {
                    return Err(BackendError::RateLimited { attempts: attempt })
                }
                Err(BackendError::Transient { message, .. }) => {
                    return Err(BackendError::Transient {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    /// `Authorization` gets a `Bearer` prefix; any other header carries the raw key.
    pub auth_header: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            auth_header: "Authorization".to_string(),
            timeout: Duration::from_secs(120),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    limiter: InflightLimiter,
    id: String,
}

impl RemoteBackend {
    /// Reads the API key from the environment variable named in `config`.
    pub fn from_env(config: RemoteConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            BackendError::Config(format!("environment variable {} is not set", config.api_key_env))
        })?;
        RemoteBackend::with_key(config, key)
    }

    pub fn with_key(config: RemoteConfig, api_key: impl Into<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            id: format!("remote:{}", config.model),
            limiter: InflightLimiter::new(config.max_in_flight),
            api_key: api_key.into(),
            client,
            config,
        })
    }

    pub fn limiter(&self) -> &InflightLimiter {
        &self.limiter
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.user_text})];
        for img in &req.images {
            let b64 = base64::engine::general_purpose::STANDARD.encode(img.as_bytes());
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        let mut messages = Vec::new();
        if !req.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_text}));
        }
        messages.push(json!({"role": "user", "content": content}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.decode.temperature,
            "max_tokens": req.decode.max_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Result<(String, Usage), BackendError> {
        let auth_value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
            format!("Bearer {}", self.api_key)
        } else {
            self.api_key.clone()
        };
        let resp = self
            .client
            .post(&self.config.endpoint)
            .header(self.config.auth_header.as_str(), auth_value)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transient {
                attempts: 1,
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transient {
            attempts: 1,
            message: e.to_string(),
        })?;
        match status {
            200..=299 => parse_completion(&text),
            401 | 403 => Err(BackendError::Auth(truncate(&text, 200))),
            429 => Err(BackendError::RateLimited { attempts: 1 }),
            408 | 500..=599 => Err(BackendError::Transient {
                attempts: 1,
                message: format!("http {status}"),
            }),
            _ => Err(BackendError::Http {
                status,
                body: truncate(&text, 200),
            }),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// Extract `choices[0].message.content` and token usage from a
/// chat-completion response body.
pub fn parse_completion(body: &str) -> Result<(String, Usage), BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // Some providers return a list of content parts.
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => {
            return Err(BackendError::MalformedResponse(
                "missing choices[0].message.content".into(),
            ))
        }
    };
    let usage = Usage {
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok((text, usage))
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = self.request_body(req);
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let (text, usage) = self.config.retry.run(|_| self.attempt(&body), std::thread::sleep)?;
        Ok(ChatResponse {
            text,
            usage,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
        })
    }
}

/// One canned response and the request it must answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring that must occur in the request's user text. Empty matches anything.
    #[serde(default)]
    pub user_text_contains: String,
    /// Required image count, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<usize>,
    pub text: String,
}

impl ScriptEntry {
    pub fn new(user_text_contains: impl Into<String>, images: Option<usize>, text: impl Into<String>) -> Self {
        Self {
            user_text_contains: user_text_contains.into(),
            images,
            text: text.into(),
        }
    }

    pub fn any(text: impl Into<String>) -> Self {
        ScriptEntry::new("", None, text)
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        req.user_text.contains(&self.user_text_contains) && self.images.is_none_or(|n| n == req.images.len())
    }
}

/// Serves canned responses strictly in order.
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            cursor: Mutex::new(0),
        }
    }

    /// Load a JSONL script, one [`ScriptEntry`] per line.
    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| BackendError::Config(format!("script line {}: {e}", n + 1)))?,
            );
        }
        Ok(ScriptedBackend::new(entries))
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.consumed()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        let index = *cursor;
        let entry = self
            .entries
            .get(index)
            .ok_or(BackendError::ScriptExhausted { consumed: index })?;
        if !entry.matches(req) {
            return Err(BackendError::ScriptMismatch {
                index,
                expected: entry.user_text_contains.clone(),
                images: entry.images,
                got_images: req.images.len(),
                got_head: truncate(&req.user_text, 120),
            });
        }
        *cursor += 1;
        Ok(ChatResponse {
            text: entry.text.clone(),
            usage: Usage::default(),
            latency_ms: 0,
            backend_id: "scripted".into(),
        })
    }
}

/// Backend answering through a closure.
pub struct FnBackend<F> {
    id: String,
    respond: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, respond: F) -> Self {
        Self {
            id: id.into(),
            respond,
        }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse {
            text: (self.respond)(req)?,
            usage: Usage::default(),
            latency_ms: 0,
            backend_id: self.id.clone(),
        })
    }
}

/// One line of a session file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub digest: String,
    pub response: ChatResponse,
    /// Head of the user text, kept for miss diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_head: Option<String>,
}

const REQUEST_HEAD_CHARS: usize = 160;

/// Wraps a backend and appends every successful exchange to a session file.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    file: Mutex<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn create(inner: B, path: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| BackendError::Io(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(req)?;
        let record = SessionRecord {
            digest: req.digest(),
            response: response.clone(),
            request_head: Some(truncate(&req.user_text, REQUEST_HEAD_CHARS)),
        };
        let mut line = serde_json::to_string(&record).map_err(|e| BackendError::Io(e.to_string()))?;
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| BackendError::Io(e.to_string()))?;
        Ok(response)
    }
}

/// Serves recorded responses by request digest. Repeated identical requests
/// are answered in recording order.
pub struct ReplayBackend {
    queues: Mutex<BTreeMap<String, VecDeque<ChatResponse>>>,
    heads: BTreeMap<String, String>,
    served: Mutex<usize>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str::<SessionRecord>(&line)
                    .map_err(|e| BackendError::Io(format!("session line {}: {e}", n + 1)))?,
            );
        }
        Ok(ReplayBackend::from_records(records))
    }

    pub fn from_records(records: impl IntoIterator<Item = SessionRecord>) -> Self {
        let mut queues: BTreeMap<String, VecDeque<ChatResponse>> = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for r in records {
            if let Some(head) = r.request_head {
                heads.entry(r.digest.clone()).or_insert(head);
            }
            queues.entry(r.digest).or_default().push_back(r.response);
        }
        Self {
            queues: Mutex::new(queues),
            heads,
            served: Mutex::new(0),
        }
    }

    pub fn served(&self) -> usize {
        *self.served.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Recorded digest whose request text shares the longest prefix with `req`.
    fn nearest(&self, req: &ChatRequest) -> Option<String> {
        let head = truncate(&req.user_text, REQUEST_HEAD_CHARS);
        self.heads
            .iter()
            .map(|(digest, h)| {
                let common = h.chars().zip(head.chars()).take_while(|(a, b)| a == b).count();
                (common, digest)
            })
            .max_by_key(|(common, _)| *common)
            .map(|(common, digest)| format!("{digest} (shares {common} leading chars of user text)"))
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let digest = req.digest();
        let mut queues = self.queues.lock().unwrap_or_else(|e| e.into_inner());
        match queues.get_mut(&digest).and_then(VecDeque::pop_front) {
            Some(resp) => {
                *self.served.lock().unwrap_or_else(|e| e.into_inner()) += 1;
                Ok(resp)
            }
            None => {
                drop(queues);
                Err(BackendError::ReplayMiss {
                    nearest: self.nearest(req),
                    digest,
                })
            }
        }
    }
}

pub enum SessionMode<B> {
    Record(B),
    Replay,
}

/// Open a session file either to record around `inner` or to replay from it.
pub fn record_and_replay<B: ChatBackend + 'static>(
    session_path: &Path,
    mode: SessionMode<B>,
) -> Result<Box<dyn ChatBackend>, BackendError> {
    Ok(match mode {
        SessionMode::Record(inner) => Box::new(RecordingBackend::create(inner, session_path)?),
        SessionMode::Replay => Box::new(ReplayBackend::open(session_path)?),
    })
}
