//! Chat-completion and embedding client with record/replay cassettes.
//!
//! Every backend call is fingerprinted (SHA-256 over the endpoint, model and
//! key-sorted request body). Cassettes are ordered: replay must see the same
//! calls in the same order or the run stops with a determinism violation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory::{Embedder, MemoryError};

pub const ENV_URL: &str = "HEDGE_LLM_URL";
pub const ENV_KEY: &str = "HEDGE_LLM_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4-1106-preview";
pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-3-large";
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no endpoint configured (set {ENV_URL}) and no cassette to replay")]
    NotConfigured,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("determinism violation: cassette expects {expected}, request is {actual}")]
    DeterminismViolation { expected: String, actual: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("cassette {path}: {message}")]
    Cassette { path: PathBuf, message: String },
}

impl GatewayError {
    pub fn is_determinism_violation(&self) -> bool {
        matches!(self, GatewayError::DeterminismViolation { .. })
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("at least one message is required".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("model name is empty".into()));
        }
        Ok(())
    }

    fn body(&self) -> Value {
        json!({ "model": self.model, "messages": self.messages, "temperature": self.temperature })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(rename = "in")]
    pub input: u64,
    #[serde(rename = "out")]
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: Value,
    pub response: String,
    pub tokens: TokenUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Record,
    #[default]
    Replay,
    Passthrough,
}

/// Ordered request/response log.
#[derive(Debug, Clone, Default)]
pub struct Cassette {
    pub mode: CassetteMode,
    pub entries: Vec<CassetteEntry>,
    cursor: usize,
    path: Option<PathBuf>,
}

impl Cassette {
    pub fn in_memory(mode: CassetteMode, entries: Vec<CassetteEntry>) -> Self {
        Self { mode, entries, cursor: 0, path: None }
    }

    /// Replay reads `path`; Record truncates it and appends as calls happen;
    /// Passthrough ignores it.
    pub fn open(path: &Path, mode: CassetteMode) -> Result<Self> {
        let err = |message: String| GatewayError::Cassette { path: path.to_path_buf(), message };
        let entries = match mode {
            CassetteMode::Replay => Self::read_entries(path)?,
            CassetteMode::Record => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
                }
                std::fs::File::create(path).map_err(|e| err(e.to_string()))?;
                Vec::new()
            }
            CassetteMode::Passthrough => Vec::new(),
        };
        Ok(Self { mode, entries, cursor: 0, path: Some(path.to_path_buf()) })
    }

    pub fn read_entries(path: &Path) -> Result<Vec<CassetteEntry>> {
        let err = |message: String| GatewayError::Cassette { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(format!("line {}: {e}", i + 1))))
            .collect()
    }

    pub fn write_entries(path: &Path, entries: &[CassetteEntry]) -> Result<()> {
        let mut out = String::new();
        for e in entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| GatewayError::Cassette { path: path.to_path_buf(), message: e.to_string() })
    }

    fn append(&mut self, entry: CassetteEntry) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(path)
                .map_err(|e| GatewayError::Cassette { path: path.clone(), message: e.to_string() })?;
            writeln!(f, "{}", serde_json::to_string(&entry).expect("entry serializes"))
                .map_err(|e| GatewayError::Cassette { path: path.clone(), message: e.to_string() })?;
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Entries not yet consumed by replay.
    pub fn remaining(&self) -> usize {
        self.entries.len().saturating_sub(self.cursor)
    }
}

/// Serializes JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn rec(v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String((*k).clone()).to_string());
                    out.push(':');
                    rec(&m[*k], out);
                }
                out.push('}');
            }
            Value::Array(a) => {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    rec(x, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut s = String::new();
    rec(v, &mut s);
    s
}

/// Hex SHA-256 of `(endpoint, model, canonical body)`. The sampling
/// temperature is not part of the fingerprint.
pub fn fingerprint(endpoint: &str, model: &str, body: &Value) -> String {
    let mut body = body.clone();
    if let Value::Object(m) = &mut body {
        m.remove("temperature");
    }
    let mut h = Sha256::new();
    h.update(endpoint.as_bytes());
    h.update([0u8]);
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(canonical_json(&body).as_bytes());
    let mut hex = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Moves one JSON request to the backend and returns its JSON response.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError>;
}

#[cfg(feature = "http")]
#[derive(Debug, Default, Clone)]
pub struct HttpTransport;

#[cfg(feature = "http")]
impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = ureq::post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| TransportError(e.to_string()))?;
        resp.body_mut().read_json::<Value>().map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay: Duration::from_millis(250), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16)).min(self.max_delay)
    }
}

/// USD per 1000 tokens, input and output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable(pub BTreeMap<String, (f64, f64)>);

impl Default for PriceTable {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert(DEFAULT_MODEL.to_string(), (0.01, 0.03));
        m.insert(DEFAULT_EMBEDDING_MODEL.to_string(), (0.00013, 0.0));
        Self(m)
    }
}

impl PriceTable {
    pub fn cost(&self, model: &str, tokens: TokenUsage) -> f64 {
        self.0
            .get(model)
            .map(|(i, o)| (tokens.input as f64 * i + tokens.output as f64 * o) / 1000.0)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GatewayConfig {
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub prices: PriceTable,
}

impl GatewayConfig {
    pub fn from_env() -> Self {
        Self {
            base_url: std::env::var(ENV_URL).ok().filter(|s| !s.is_empty()),
            api_key: std::env::var(ENV_KEY).ok().filter(|s| !s.is_empty()),
            ..Self::default()
        }
    }
}

pub struct Gateway {
    config: GatewayConfig,
    transport: Option<Box<dyn Transport>>,
    cassette: Mutex<Cassette>,
    usage: Mutex<UsageTotals>,
    network_calls: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("base_url", &self.config.base_url)
            .field("mode", &self.mode())
            .field("network_calls", &self.network_calls())
            .finish()
    }
}

fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

impl Gateway {
    pub fn new(config: GatewayConfig, transport: Option<Box<dyn Transport>>, cassette: Cassette) -> Self {
        Self {
            config,
            transport,
            cassette: Mutex::new(cassette),
            usage: Mutex::new(UsageTotals::default()),
            network_calls: AtomicU64::new(0),
        }
    }

    /// Replay-only gateway; any network access is impossible.
    pub fn replay(entries: Vec<CassetteEntry>) -> Self {
        Self::new(GatewayConfig::default(), None, Cassette::in_memory(CassetteMode::Replay, entries))
    }

    pub fn mode(&self) -> CassetteMode {
        self.cassette.lock().unwrap().mode
    }

    /// Requests that reached the transport.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> UsageTotals {
        *self.usage.lock().unwrap()
    }

    pub fn cassette_entries(&self) -> Vec<CassetteEntry> {
        self.cassette.lock().unwrap().entries.clone()
    }

    pub fn remaining(&self) -> usize {
        self.cassette.lock().unwrap().remaining()
    }

    fn account(&self, model: &str, tokens: TokenUsage) {
        let mut u = self.usage.lock().unwrap();
        u.calls += 1;
        u.tokens_in += tokens.input;
        u.tokens_out += tokens.output;
        u.cost_usd += self.config.prices.cost(model, tokens);
    }

    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value> {
        let transport = self.transport.as_deref().ok_or(GatewayError::NotConfigured)?;
        let base = self.config.base_url.as_deref().ok_or(GatewayError::NotConfigured)?;
        let url = format!("{}/{}", base.trim_end_matches('/'), path);
        let retry = self.config.retry;
        let mut last = String::new();
        for attempt in 0..retry.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(retry.delay(attempt - 1));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match transport.post_json(&url, self.config.api_key.as_deref(), body) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("{url}: attempt {} failed: {e}", attempt + 1);
                    last = e.0;
                }
            }
        }
        Err(GatewayError::Transport { attempts: retry.max_attempts.max(1), message: last })
    }

    /// Core record/replay logic shared by chat and embeddings. `fetch`
    /// performs the network call and returns `(response text, tokens)`.
    fn exchange(
        &self,
        endpoint: &str,
        model: &str,
        body: Value,
        fetch: impl FnOnce(&Value) -> Result<(String, TokenUsage)>,
    ) -> Result<String> {
        let fp = fingerprint(endpoint, model, &body);
        let mode = self.mode();
        match mode {
            CassetteMode::Replay => {
                let mut c = self.cassette.lock().unwrap();
                let Some(entry) = c.entries.get(c.cursor).cloned() else {
                    return Err(GatewayError::DeterminismViolation { expected: "<end of cassette>".into(), actual: fp });
                };
                if entry.fingerprint != fp {
                    return Err(GatewayError::DeterminismViolation { expected: entry.fingerprint, actual: fp });
                }
                c.cursor += 1;
                drop(c);
                self.account(model, entry.tokens);
                Ok(entry.response)
            }
            CassetteMode::Record => {
                let cached = {
                    let c = self.cassette.lock().unwrap();
                    c.entries.iter().find(|e| e.fingerprint == fp).cloned()
                };
                let entry = match cached {
                    // Served from the cassette; the duplicate keeps replay order aligned.
                    Some(e) => CassetteEntry { tokens: TokenUsage::default(), ..e },
                    None => {
                        let (response, tokens) = fetch(&body)?;
                        CassetteEntry { fingerprint: fp, request: body, response, tokens }
                    }
                };
                self.account(model, entry.tokens);
                let response = entry.response.clone();
                self.cassette.lock().unwrap().append(entry)?;
                Ok(response)
            }
            CassetteMode::Passthrough => {
                let (response, tokens) = fetch(&body)?;
                self.account(model, tokens);
                Ok(response)
            }
        }
    }

    /// Sends a chat completion and returns the first choice's content.
    pub fn chat(&self, request: &ChatRequest) -> Result<String> {
        request.validate()?;
        let body = request.body();
        self.exchange("chat/completions", &request.model, body, |body| {
            let v = self.post_with_retry("chat/completions", body)?;
            let content = v
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::BadResponse("missing choices[0].message.content".into()))?
                .to_string();
            let prompt_chars: String = request.messages.iter().map(|m| m.content.as_str()).collect();
            let tokens = TokenUsage {
                input: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or_else(|| estimate_tokens(&prompt_chars)),
                output: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or_else(|| estimate_tokens(&content)),
            };
            Ok((content, tokens))
        })
    }

    /// Fetches an embedding and returns it L2-normalised.
    pub fn embed_remote(&self, model: &str, text: &str) -> Result<Vec<f64>> {
        let body = json!({ "model": model, "input": text });
        let raw = self.exchange("embeddings", model, body, |body| {
            let v = self.post_with_retry("embeddings", body)?;
            let emb = v
                .pointer("/data/0/embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::BadResponse("missing data[0].embedding".into()))?;
            let tokens = TokenUsage {
                input: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or_else(|| estimate_tokens(text)),
                output: 0,
            };
            Ok((Value::Array(emb.clone()).to_string(), tokens))
        })?;
        let vec: Vec<f64> = serde_json::from_str(&raw).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || vec.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::BadResponse("degenerate embedding".into()));
        }
        Ok(vec.into_iter().map(|x| x / norm).collect())
    }
}

/// [`Embedder`] backed by the gateway's embedding endpoint.
pub struct RemoteEmbedder {
    pub gateway: std::sync::Arc<Gateway>,
    pub model: String,
    pub dim: usize,
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> crate::memory::Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(MemoryError::EmptyText);
        }
        self.gateway.embed_remote(&self.model, text).map_err(|e| MemoryError::Backend(e.to_string()))
    }
}

/// Scripted transport for tests and offline recording: answers from a
/// closure and counts calls.
pub struct FnTransport<F> {
    f: F,
    calls: AtomicU64,
}

impl<F> FnTransport<F>
where
    F: Fn(&str, &Value) -> std::result::Result<Value, TransportError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> Transport for FnTransport<F>
where
    F: Fn(&str, &Value) -> std::result::Result<Value, TransportError> + Send + Sync,
{
    fn post_json(&self, url: &str, _api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(url, body)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
        (**self).post_json(url, api_key, body)
    }
}
