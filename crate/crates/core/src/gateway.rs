//! Chat-completion access: backends, response caching, retries, rate
//! limiting and ordered batch execution.
//!
//! Three backends implement [`ChatBackend`]:
//! - [`HttpBackend`] speaks the OpenAI-compatible chat-completions protocol;
//! - [`ReplayBackend`] serves recorded replies keyed by [`prompt_hash`];
//! - [`RuleMockBackend`] answers from keyword rules, for offline pipelines.
//!
//! [`Gateway`] wraps a backend with a [`ResponseCache`] that is consulted
//! before every call, so reruns resume from where a previous run stopped.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{scoped_rng, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub n: u32,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            n: 1,
            max_tokens: 10,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.n == 0 || self.max_tokens == 0 {
            return Err(GatewayError::Config("n and max_tokens must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::Config("model_id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("malformed backend reply ({reason}): {raw}")]
    Malformed { reason: String, raw: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded reply for prompt hash {0}")]
    NoFixture(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<GatewayError> },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::RateLimited(_) | GatewayError::Timeout(_))
    }
}

/// What a backend returns for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendReply {
    pub content: String,
    pub finish_reason: String,
}

impl BackendReply {
    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            finish_reason: "stop".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub content: String,
    pub finish_reason: String,
    pub backend_id: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

impl CompletionResult {
    /// Anything other than a natural stop, e.g. `"length"` when
    /// `max_tokens` cut the answer short.
    pub fn truncated(&self) -> bool {
        self.finish_reason != "stop"
    }
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<BackendReply, GatewayError>;
}

/// Request body for `POST /chat/completions`.
pub fn chat_request_body(messages: &[ChatMessage], params: &GenerationParams) -> serde_json::Value {
    serde_json::json!({
        "model": params.model_id,
        "messages": messages,
        "temperature": params.temperature,
        "n": params.n,
        "max_tokens": params.max_tokens,
    })
}

/// Extracts the first choice's content from a chat-completions reply.
pub fn parse_chat_response(raw: &str) -> Result<BackendReply, GatewayError> {
    let malformed = |reason: &str| GatewayError::Malformed {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| malformed(&e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.as_array())
        .and_then(|c| c.first())
        .ok_or_else(|| malformed("no choices"))?;
    let content = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| malformed("choice has no message content"))?;
    let finish_reason = choice
        .get("finish_reason")
        .and_then(|f| f.as_str())
        .unwrap_or("unknown");
    Ok(BackendReply {
        content: content.to_string(),
        finish_reason: finish_reason.to_string(),
    })
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub const DEFAULT_BASE_URL: &'static str = "https://api.openai.com/v1";

    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        "http"
    }

    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<BackendReply, GatewayError> {
        let mut request = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&chat_request_body(messages, params));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(e.to_string())
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(e.to_string())
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        match status {
            200..=299 => parse_chat_response(&body),
            401 | 403 => Err(GatewayError::Auth(body)),
            429 => Err(GatewayError::RateLimited(body)),
            408 | 504 => Err(GatewayError::Timeout(body)),
            _ => Err(GatewayError::Http { status, body }),
        }
    }
}

/// Stable hash of a message list, used to key replay fixtures.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    sha256_hex(&serde_json::to_vec(messages).expect("messages serialize"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub prompt_hash: String,
    pub content: String,
    #[serde(default = "default_finish_reason")]
    pub finish_reason: String,
}

fn default_finish_reason() -> String {
    "stop".to_string()
}

#[derive(Debug, Default)]
pub struct ReplayBackend {
    replies: HashMap<String, BackendReply>,
}

impl ReplayBackend {
    pub fn new(fixtures: impl IntoIterator<Item = ReplayFixture>) -> Self {
        let replies = fixtures
            .into_iter()
            .map(|f| {
                (
                    f.prompt_hash,
                    BackendReply {
                        content: f.content,
                        finish_reason: f.finish_reason,
                    },
                )
            })
            .collect();
        Self { replies }
    }

    /// One [`ReplayFixture`] JSON object per line.
    pub fn from_jsonl<R: BufRead>(source: R) -> Result<Self, GatewayError> {
        let mut fixtures = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Config(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fixture: ReplayFixture = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Config(format!("replay fixture line {}: {e}", idx + 1)))?;
            fixtures.push(fixture);
        }
        Ok(Self::new(fixtures))
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn backend_id(&self) -> &str {
        "replay"
    }

    fn chat(&self, messages: &[ChatMessage], _params: &GenerationParams) -> Result<BackendReply, GatewayError> {
        let hash = prompt_hash(messages);
        self.replies.get(&hash).cloned().ok_or(GatewayError::NoFixture(hash))
    }
}

/// Answers `"<Label>."` for the first rule whose keyword occurs
/// (case-insensitively) in the target block, i.e. the text after the last
/// `Dataset title:`. Falls back to `"Unknown."`.
#[derive(Debug, Clone)]
pub struct RuleMockBackend {
    rules: Vec<(String, String)>,
}

pub const TARGET_MARKER: &str = "Dataset title:";

impl RuleMockBackend {
    pub fn new(rules: Vec<(String, String)>) -> Result<Self, GatewayError> {
        if rules.is_empty() {
            return Err(GatewayError::Config("mock backend needs at least one rule".into()));
        }
        let rules = rules.into_iter().map(|(k, label)| (k.to_lowercase(), label)).collect();
        Ok(Self { rules })
    }

    /// Parses `keyword<TAB>label` lines; `#` starts a comment.
    pub fn parse_rules(source: &str) -> Result<Vec<(String, String)>, GatewayError> {
        source
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(idx, line)| {
                let (keyword, label) = line
                    .split_once('\t')
                    .ok_or_else(|| GatewayError::Config(format!("mock rules line {}: expected keyword<TAB>label", idx + 1)))?;
                if keyword.trim().is_empty() || label.trim().is_empty() {
                    return Err(GatewayError::Config(format!("mock rules line {}: empty field", idx + 1)));
                }
                Ok((keyword.trim().to_string(), label.trim().to_string()))
            })
            .collect()
    }

    pub fn reply_for(&self, prompt: &str) -> String {
        let target = prompt
            .rfind(TARGET_MARKER)
            .map(|at| &prompt[at + TARGET_MARKER.len()..])
            .unwrap_or(prompt)
            .to_lowercase();
        self.rules
            .iter()
            .find(|(keyword, _)| target.contains(keyword.as_str()))
            .map(|(_, label)| format!("{label}."))
            .unwrap_or_else(|| "Unknown.".to_string())
    }
}

impl ChatBackend for RuleMockBackend {
    fn backend_id(&self) -> &str {
        "mock"
    }

    fn chat(&self, messages: &[ChatMessage], _params: &GenerationParams) -> Result<BackendReply, GatewayError> {
        let prompt: String = messages.iter().map(|m| m.content.as_str()).collect();
        Ok(BackendReply::stop(self.reply_for(&prompt)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseCacheEntry {
    pub key: String,
    pub result: CompletionResult,
    pub created_at: u64,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    model_id: &'a str,
    temperature: f64,
    n: u32,
    max_tokens: u32,
    messages: &'a [ChatMessage],
}

pub fn response_cache_key(backend_id: &str, params: &GenerationParams, messages: &[ChatMessage]) -> String {
    let material = KeyMaterial {
        backend_id,
        model_id: &params.model_id,
        temperature: params.temperature,
        n: params.n,
        max_tokens: params.max_tokens,
        messages,
    };
    sha256_hex(&serde_json::to_vec(&material).expect("key material serializes"))
}

/// Content-addressed store: `<dir>/<key[..2]>/<key>.json`, one entry per
/// file, written once via rename.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, ResponseCacheEntry>>,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            memory: RwLock::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn open(dir: &Path) -> Result<Self, GatewayError> {
        fs::create_dir_all(dir).map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            memory: RwLock::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    fn entry_path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<ResponseCacheEntry> {
        if let Some(hit) = self.memory.read().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let path = self.entry_path(key)?;
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<ResponseCacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => {
                self.memory
                    .write()
                    .expect("cache lock")
                    .insert(key.to_string(), entry.clone());
                Some(entry)
            }
            _ => {
                log::warn!("ignoring unreadable cache entry {}", path.display());
                None
            }
        }
    }

    /// Writes the entry unless one already exists for the key.
    pub fn put(&self, entry: ResponseCacheEntry) -> Result<(), GatewayError> {
        let mut memory = self.memory.write().expect("cache lock");
        if memory.contains_key(&entry.key) {
            return Ok(());
        }
        if let Some(path) = self.entry_path(&entry.key) {
            if !path.exists() {
                let io = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
                let parent = path.parent().expect("entry has a parent");
                fs::create_dir_all(parent).map_err(io)?;
                let tmp = parent.join(format!(
                    ".{}.{}.{}.tmp",
                    entry.key,
                    std::process::id(),
                    self.tmp_counter.fetch_add(1, Ordering::Relaxed)
                ));
                let mut file = fs::File::create(&tmp).map_err(io)?;
                file.write_all(&serde_json::to_vec_pretty(&entry).expect("entry serializes"))
                    .map_err(io)?;
                file.sync_all().map_err(io)?;
                fs::rename(&tmp, &path).map_err(io)?;
            }
        }
        memory.insert(entry.key.clone(), entry);
        Ok(())
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub fn thread_sleeper() -> Sleeper {
    Arc::new(std::thread::sleep)
}

/// Exponential backoff with bounded, seeded jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            jitter: 0.2,
            seed: 0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`
    /// scaled by a factor in `[1 - jitter, 1 + jitter]`.
    pub fn delay(&self, key: &str, retry: u32) -> Duration {
        let mut rng = scoped_rng(self.seed, &format!("retry:{key}:{retry}"));
        let factor = 1.0 + rng.gen_range(-self.jitter..=self.jitter);
        self.base_delay.mul_f64(2f64.powi(retry as i32) * factor)
    }
}

/// Spaces requests at least `60 / requests_per_minute` seconds apart.
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(requests_per_minute: u32) -> Self {
        assert!(requests_per_minute > 0, "rate must be positive");
        Self {
            interval: Duration::from_secs(60) / requests_per_minute,
            next_slot: Mutex::new(None),
        }
    }

    /// How long the caller must wait before its request may go out.
    fn reserve(&self) -> Duration {
        let now = Instant::now();
        let mut next = self.next_slot.lock().expect("rate limiter lock");
        let slot = next.map_or(now, |n| n.max(now));
        *next = Some(slot + self.interval);
        slot - now
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    sleeper: Sleeper,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>) -> Self {
        Self {
            backend,
            cache,
            retry: RetryPolicy::default(),
            limiter: None,
            sleeper: thread_sleeper(),
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: Option<u32>) -> Self {
        self.limiter = requests_per_minute.map(RateLimiter::per_minute);
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    /// Requests that reached the backend, retries included.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<CompletionResult, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::Config("empty message list".into()));
        }
        params.validate()?;
        let backend_id = self.backend.backend_id().to_string();
        let key = response_cache_key(&backend_id, params, messages);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(CompletionResult {
                from_cache: true,
                latency_ms: 0,
                ..hit.result
            });
        }

        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                let wait = limiter.reserve();
                if !wait.is_zero() {
                    (self.sleeper)(wait);
                }
            }
            let started = Instant::now();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.chat(messages, params) {
                Ok(reply) => break (reply, started.elapsed()),
                Err(err) if err.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(&key, attempt - 1);
                    log::warn!("{err}; retry {attempt} in {:.2}s", delay.as_secs_f64());
                    (self.sleeper)(delay);
                }
                Err(err) if err.is_retryable() => {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        last: Box::new(err),
                    })
                }
                Err(err) => return Err(err),
            }
        };

        let (reply, elapsed) = reply;
        let result = CompletionResult {
            content: reply.content,
            finish_reason: reply.finish_reason,
            backend_id,
            from_cache: false,
            latency_ms: elapsed.as_millis() as u64,
        };
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.cache.put(ResponseCacheEntry {
            key,
            result: result.clone(),
            created_at,
        })?;
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub record_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub from_cache: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchCounts {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub cache_hits: usize,
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub results: Vec<(String, Result<CompletionResult, GatewayError>)>,
    pub counts: BatchCounts,
}

impl BatchOutcome {
    pub fn statuses(&self) -> Vec<JobStatus> {
        self.results
            .iter()
            .map(|(id, r)| match r {
                Ok(c) => JobStatus {
                    record_id: id.clone(),
                    ok: true,
                    error: None,
                    from_cache: c.from_cache,
                    finish_reason: Some(c.finish_reason.clone()),
                },
                Err(e) => JobStatus {
                    record_id: id.clone(),
                    ok: false,
                    error: Some(e.to_string()),
                    from_cache: false,
                    finish_reason: None,
                },
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
    #[error("all {} jobs failed", .0.counts.total)]
    AllFailed(BatchOutcome),
}

/// Runs every job on up to `parallelism` workers. Results come back in
/// input order; a failing job is recorded, not fatal.
pub fn batch_complete(
    jobs: &[(String, Vec<ChatMessage>)],
    params: &GenerationParams,
    gateway: &Gateway,
    parallelism: usize,
) -> Result<BatchOutcome, BatchError> {
    if parallelism == 0 {
        return Err(BatchError::InvalidParallelism);
    }
    let slots: Vec<Mutex<Option<Result<CompletionResult, GatewayError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = parallelism.min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, messages)) = jobs.get(idx) else { break };
                let result = gateway.complete(messages, params);
                *slots[idx].lock().expect("slot lock") = Some(result);
            });
        }
    });

    let results: Vec<_> = jobs
        .iter()
        .zip(slots)
        .map(|((id, _), slot)| {
            let result = slot.into_inner().expect("slot lock").expect("every job ran");
            (id.clone(), result)
        })
        .collect();
    let succeeded = results.iter().filter(|(_, r)| r.is_ok()).count();
    let counts = BatchCounts {
        total: results.len(),
        succeeded,
        failed: results.len() - succeeded,
        cache_hits: results
            .iter()
            .filter(|(_, r)| matches!(r, Ok(c) if c.from_cache))
            .count(),
    };
    let outcome = BatchOutcome { results, counts };
    if outcome.counts.total > 0 && outcome.counts.succeeded == 0 {
        return Err(BatchError::AllFailed(outcome));
    }
    Ok(outcome)
}
