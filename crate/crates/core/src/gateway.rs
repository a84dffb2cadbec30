//! Chat-completion and embedding backends behind one gateway.
//!
//! The gateway owns retries with exponential backoff, the in-flight request
//! bound, the content-addressed embedding cache and the per-attempt trace.
//! Two backend families exist: an HTTP client for the common chat-completions
//! and embeddings JSON interface, and a scripted fixture backend that makes
//! every pipeline run reproducible offline.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::hash::Hasher;
use thiserror::Error;

use crate::prompts::{Message, Template, TemplateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Permanent(String),
    #[error("fixture has no reply for template `{template}`, key `{key}`, repetition {repetition}")]
    FixtureMiss {
        template: String,
        key: String,
        repetition: u32,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("request {request}: retry budget exhausted after {attempts} attempts ({last})")]
    RetriesExhausted {
        request: String,
        attempts: u32,
        last: String,
    },
    #[error("request {request}: {source}")]
    Backend {
        request: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("backend returned {found} embeddings for {expected} texts")]
    Arity { expected: usize, found: usize },
    #[error("cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: String,
    /// Stable lookup key chosen by the caller, e.g. a record id.
    pub key: String,
    /// Distinguishes repeated samples for the same prompt.
    pub repetition: u32,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Renders `template` with `vars`.
    pub fn from_template(
        template: &Template,
        vars: &BTreeMap<String, String>,
        key: impl Into<String>,
        repetition: u32,
        temperature: f64,
    ) -> Result<Self, TemplateError> {
        Ok(ChatRequest {
            template_id: template.id.clone(),
            key: key.into(),
            repetition,
            messages: template.render(vars)?,
            temperature,
            max_tokens: 512,
            seed: None,
        })
    }

    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.template_id, self.key, self.repetition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// Identifies the embedding space; part of every cache key.
    fn model_id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

/// Dimension of the hashed bag-of-words test encoder.
pub const HASHED_BOW_DIM: usize = 256;

/// Deterministic test encoder.
///
/// Text is lowercased and split on every non-alphanumeric character. Each
/// token is hashed with 64-bit FNV-1a; bucket `h % dim` receives `+1` when
/// bit 63 of `h` is clear and `-1` otherwise. The raw count vector is
/// returned; callers normalize. Token order never matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBowEncoder {
    pub dim: usize,
}

impl Default for HashedBowEncoder {
    fn default() -> Self {
        HashedBowEncoder { dim: HASHED_BOW_DIM }
    }
}

impl HashedBowEncoder {
    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let mut h = FnvHasher::default();
            h.write(token.as_bytes());
            let h = h.finish();
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        v
    }
}

impl EmbeddingBackend for HashedBowEncoder {
    fn model_id(&self) -> String {
        format!("hashed-bow-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.encode(t)).collect())
    }
}

/// One canned chat reply. `rep = None` matches any repetition not listed
/// explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureReply {
    pub template: String,
    pub key: String,
    #[serde(default)]
    pub rep: Option<u32>,
    pub reply: String,
}

/// Scripted failure injection for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFailure {
    pub template: String,
    pub key: String,
    #[serde(default)]
    pub rep: Option<u32>,
    /// Transient failures returned before the reply is served.
    #[serde(default)]
    pub transient: u32,
    /// Fail every attempt.
    #[serde(default)]
    pub always: bool,
}

/// Canned replies and embeddings. Texts without an explicit embedding fall
/// back to the hashed bag-of-words encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScriptedFixture {
    #[serde(default)]
    pub chat: Vec<FixtureReply>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub failures: Vec<FixtureFailure>,
}

impl ScriptedFixture {
    pub fn push(&mut self, template: &str, key: &str, rep: Option<u32>, reply: impl Into<String>) {
        self.chat.push(FixtureReply {
            template: template.to_string(),
            key: key.to_string(),
            rep,
            reply: reply.into(),
        });
    }
}

type FixtureKey = (String, String, Option<u32>);

/// Chat and embedding backend serving a [`ScriptedFixture`].
#[derive(Debug)]
pub struct ScriptedBackend {
    replies: HashMap<FixtureKey, String>,
    failures: HashMap<FixtureKey, FixtureFailure>,
    embeddings: BTreeMap<String, Vec<f64>>,
    attempts: Mutex<HashMap<String, u32>>,
    encoder: HashedBowEncoder,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        let replies = fixture
            .chat
            .into_iter()
            .map(|r| ((r.template, r.key, r.rep), r.reply))
            .collect();
        let failures = fixture
            .failures
            .into_iter()
            .map(|f| ((f.template.clone(), f.key.clone(), f.rep), f))
            .collect();
        ScriptedBackend {
            replies,
            failures,
            embeddings: fixture.embeddings,
            attempts: Mutex::new(HashMap::new()),
            encoder: HashedBowEncoder::default(),
        }
    }

    fn lookup<'a, T>(map: &'a HashMap<FixtureKey, T>, req: &ChatRequest) -> Option<&'a T> {
        let exact = (req.template_id.clone(), req.key.clone(), Some(req.repetition));
        map.get(&exact)
            .or_else(|| map.get(&(req.template_id.clone(), req.key.clone(), None)))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, BackendError> {
        if let Some(f) = Self::lookup(&self.failures, req) {
            let mut attempts = self.attempts.lock().expect("attempt counter poisoned");
            let n = attempts.entry(req.id()).or_insert(0);
            *n += 1;
            if f.always || *n <= f.transient {
                return Err(BackendError::Transient(format!(
                    "scripted failure #{n} for {}",
                    req.id()
                )));
            }
        }
        let text = Self::lookup(&self.replies, req).ok_or_else(|| BackendError::FixtureMiss {
            template: req.template_id.clone(),
            key: req.key.clone(),
            repetition: req.repetition,
        })?;
        let prompt_tokens = req
            .messages
            .iter()
            .map(|m| m.content.split_whitespace().count() as u64)
            .sum();
        Ok(ChatReply {
            text: text.clone(),
            usage: Usage {
                prompt_tokens,
                completion_tokens: text.split_whitespace().count() as u64,
            },
        })
    }
}

impl EmbeddingBackend for ScriptedBackend {
    fn model_id(&self) -> String {
        format!("scripted+{}", self.encoder.model_id())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts
            .iter()
            .map(|t| {
                self.embeddings
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| self.encoder.encode(t))
            })
            .collect())
    }
}

/// Client for servers speaking the chat-completions / embeddings JSON protocol.
#[derive(Debug, Clone)]
pub struct WireBackend {
    base_url: String,
    api_key: Option<String>,
    chat_model: String,
    embed_model: String,
    client: reqwest::blocking::Client,
}

impl WireBackend {
    pub fn new(
        base_url: &str,
        api_key: Option<String>,
        chat_model: &str,
        embed_model: &str,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Permanent(e.to_string()))?;
        Ok(WireBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            chat_model: chat_model.to_string(),
            embed_model: embed_model.to_string(),
            client,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(format!("{}{}", self.base_url, path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            // connection errors and timeouts are worth retrying
            BackendError::Transient(e.to_string())
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Permanent(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Permanent(format!("bad JSON: {e}")))
    }
}

/// JSON body for a chat-completions call.
pub fn chat_body(model: &str, req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": req.messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if let Some(seed) = req.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Extracts reply text and usage from a chat-completions response.
pub fn parse_chat_response(v: &Value) -> Result<ChatReply, BackendError> {
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Permanent("response lacks choices[0].message.content".into()))?;
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(ChatReply {
        text: text.to_string(),
        usage,
    })
}

/// Extracts vectors from an embeddings response, ordered by `index`.
pub fn parse_embedding_response(v: &Value) -> Result<Vec<Vec<f64>>, BackendError> {
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Permanent("response lacks data[]".into()))?;
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let idx = item.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
        let vec = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Permanent("data item lacks embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| BackendError::Permanent("non-numeric embedding".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((idx, vec));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

impl ChatBackend for WireBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, BackendError> {
        parse_chat_response(&self.post("/chat/completions", &chat_body(&self.chat_model, req))?)
    }
}

impl EmbeddingBackend for WireBackend {
    fn model_id(&self) -> String {
        format!("wire:{}", self.embed_model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({ "model": self.embed_model, "input": texts });
        parse_embedding_response(&self.post("/embeddings", &body)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Maximum attempts per request, including the first.
    pub budget: u32,
    pub initial_backoff_ms: u64,
    pub factor: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            budget: 3,
            initial_backoff_ms: 1000,
            factor: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`. Jitter is a deterministic function
    /// of the request id so reruns sleep identically.
    pub fn delay(&self, request_id: &str, attempt: u32) -> Duration {
        let base = self.initial_backoff_ms as f64 * self.factor.powi(attempt.saturating_sub(1) as i32);
        let scale = if self.jitter {
            let mut h = FnvHasher::default();
            h.write(request_id.as_bytes());
            h.write_u32(attempt);
            0.5 + (h.finish() % 1000) as f64 / 1000.0
        } else {
            1.0
        };
        Duration::from_micros((base * scale * 1000.0) as u64)
    }
}

/// One attempt as recorded in the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request: String,
    pub attempt: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<Message>,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Default)]
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    fn acquire(&self, bound: usize, peak: &AtomicUsize) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= bound {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        peak.fetch_max(*n, Ordering::SeqCst);
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Counters exposed for inspection; not part of the deterministic trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GatewayStats {
    pub chat_attempts: usize,
    pub embed_wire_calls: usize,
    pub embed_cache_hits: usize,
    pub peak_in_flight: usize,
}

#[derive(Debug, Default)]
struct EmbeddingCache {
    memory: Mutex<HashMap<String, Vec<f64>>>,
    dir: Option<PathBuf>,
}

impl EmbeddingCache {
    fn key(model: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn get(&self, key: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.memory.lock().expect("cache poisoned").get(key) {
            return Some(v.clone());
        }
        let dir = self.dir.as_ref()?;
        let text = fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
        let v: Vec<f64> = serde_json::from_str(&text).ok()?;
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), v.clone());
        Some(v)
    }

    fn put(&self, key: &str, v: &[f64]) -> Result<(), GatewayError> {
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), v.to_vec());
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir).map_err(|e| GatewayError::Cache(e.to_string()))?;
            let body = serde_json::to_string(v).map_err(|e| GatewayError::Cache(e.to_string()))?;
            fs::write(dir.join(format!("{key}.json")), body).map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

/// Shared entry point for all model traffic.
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    retry: RetryPolicy,
    parallelism: usize,
    limiter: Limiter,
    trace: Mutex<Vec<TraceRecord>>,
    cache: EmbeddingCache,
    chat_attempts: AtomicUsize,
    embed_wire_calls: AtomicUsize,
    embed_cache_hits: AtomicUsize,
    peak: AtomicUsize,
}

impl Gateway {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        embedder: Arc<dyn EmbeddingBackend>,
        retry: RetryPolicy,
        parallelism: usize,
    ) -> Self {
        Gateway {
            chat,
            embedder,
            retry,
            parallelism: parallelism.max(1),
            limiter: Limiter::default(),
            trace: Mutex::new(Vec::new()),
            cache: EmbeddingCache::default(),
            chat_attempts: AtomicUsize::new(0),
            embed_wire_calls: AtomicUsize::new(0),
            embed_cache_hits: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Gateway over a scripted fixture serving both chat and embeddings.
    pub fn scripted(fixture: ScriptedFixture, parallelism: usize) -> Self {
        let backend = Arc::new(ScriptedBackend::new(fixture));
        let retry = RetryPolicy {
            initial_backoff_ms: 0,
            ..RetryPolicy::default()
        };
        Gateway::new(backend.clone(), backend, retry, parallelism)
    }

    pub fn with_cache_dir(mut self, dir: impl AsRef<Path>) -> Self {
        self.cache.dir = Some(dir.as_ref().to_path_buf());
        self
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            chat_attempts: self.chat_attempts.load(Ordering::SeqCst),
            embed_wire_calls: self.embed_wire_calls.load(Ordering::SeqCst),
            embed_cache_hits: self.embed_cache_hits.load(Ordering::SeqCst),
            peak_in_flight: self.peak.load(Ordering::SeqCst),
        }
    }

    fn record(&self, rec: TraceRecord) {
        self.trace.lock().expect("trace poisoned").push(rec);
    }

    /// Trace records sorted by request id and attempt, independent of the
    /// order in which concurrent requests completed.
    pub fn trace(&self) -> Vec<TraceRecord> {
        let mut t = self.trace.lock().expect("trace poisoned").clone();
        t.sort_by(|a, b| (&a.request, a.attempt).cmp(&(&b.request, b.attempt)));
        t
    }

    pub fn write_trace(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in self.trace() {
            writeln!(out, "{}", serde_json::to_string(&r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }

    /// Sends one request, retrying transient failures within the budget.
    pub fn chat(&self, req: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let id = req.id();
        let budget = self.retry.budget.max(1);
        let mut last = String::new();
        for attempt in 1..=budget {
            let result = {
                let _permit = self.limiter.acquire(self.parallelism, &self.peak);
                self.chat_attempts.fetch_add(1, Ordering::SeqCst);
                self.chat.complete(req)
            };
            let mut rec = TraceRecord {
                request: id.clone(),
                attempt,
                kind: "chat".into(),
                messages: req.messages.clone(),
                outcome: String::new(),
                reply: None,
                usage: Usage::default(),
            };
            match result {
                Ok(reply) => {
                    rec.outcome = "ok".into();
                    rec.reply = Some(reply.text.clone());
                    rec.usage = reply.usage;
                    self.record(rec);
                    return Ok(reply);
                }
                Err(BackendError::Transient(msg)) => {
                    rec.outcome = format!("transient: {msg}");
                    self.record(rec);
                    last = msg;
                    if attempt < budget {
                        let d = self.retry.delay(&id, attempt);
                        if !d.is_zero() {
                            std::thread::sleep(d);
                        }
                    }
                }
                Err(other) => {
                    rec.outcome = format!("error: {other}");
                    self.record(rec);
                    return Err(GatewayError::Backend {
                        request: id,
                        source: other,
                    });
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            request: id,
            attempts: budget,
            last,
        })
    }

    /// Sends independent requests concurrently under the in-flight bound.
    /// Results come back in request order.
    pub fn chat_many(&self, requests: &[ChatRequest]) -> Vec<Result<ChatReply, GatewayError>> {
        let workers = self.parallelism.min(requests.len());
        if workers <= 1 {
            return requests.iter().map(|r| self.chat(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ChatReply, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.chat(&requests[i]);
                    *slots[i].lock().expect("slot poisoned") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled"))
            .collect()
    }

    pub fn embedding_model(&self) -> String {
        self.embedder.model_id()
    }

    /// Embeds `texts` in order. Cached texts never reach the backend; the
    /// rest go out as one deduplicated batch.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let model = self.embedder.model_id();
        let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(&model, t)).collect();
        let mut found: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut pending: Vec<(&str, &String)> = Vec::new();
        for (k, t) in keys.iter().zip(texts) {
            if found.contains_key(k.as_str()) || pending.iter().any(|(pk, _)| *pk == k) {
                continue;
            }
            match self.cache.get(k) {
                Some(v) => {
                    self.embed_cache_hits.fetch_add(1, Ordering::SeqCst);
                    found.insert(k, v);
                }
                None => pending.push((k, t)),
            }
        }
        if !pending.is_empty() {
            let batch: Vec<String> = pending.iter().map(|(_, t)| (*t).clone()).collect();
            let request = format!(
                "embed/{}/{}",
                model,
                EmbeddingCache::key("batch", &batch.join("\u{1f}"))
            );
            let budget = self.retry.budget.max(1);
            let mut result = None;
            let mut last = String::new();
            for attempt in 1..=budget {
                let r = {
                    let _permit = self.limiter.acquire(self.parallelism, &self.peak);
                    self.embed_wire_calls.fetch_add(1, Ordering::SeqCst);
                    self.embedder.embed(&batch)
                };
                let outcome = match &r {
                    Ok(_) => "ok".to_string(),
                    Err(e) => format!("{e}"),
                };
                self.record(TraceRecord {
                    request: request.clone(),
                    attempt,
                    kind: "embed".into(),
                    messages: Vec::new(),
                    outcome,
                    reply: None,
                    usage: Usage::default(),
                });
                match r {
                    Ok(v) => {
                        result = Some(v);
                        break;
                    }
                    Err(BackendError::Transient(msg)) => {
                        last = msg;
                        if attempt < budget {
                            let d = self.retry.delay(&request, attempt);
                            if !d.is_zero() {
                                std::thread::sleep(d);
                            }
                        }
                    }
                    Err(other) => return Err(GatewayError::Backend { request, source: other }),
                }
            }
            let vectors = result.ok_or(GatewayError::RetriesExhausted {
                request,
                attempts: budget,
                last,
            })?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::Arity {
                    expected: batch.len(),
                    found: vectors.len(),
                });
            }
            for ((k, _), v) in pending.iter().zip(vectors) {
                self.cache.put(k, &v)?;
                found.insert(k, v);
            }
        }
        let out: Vec<Vec<f64>> = keys.iter().map(|k| found[k.as_str()].clone()).collect();
        let dim = out[0].len();
        if let Some(bad) = out.iter().find(|v| v.len() != dim) {
            return Err(GatewayError::Dimension {
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(out)
    }
}
