//! Text embeddings, cosine similarity and relevance retrieval.
//!
//! Two providers ship: [`HashingProvider`], a deterministic offline
//! feature-hashing embedder, and [`OpenAiEmbeddingProvider`] for services
//! that speak the OpenAI embeddings protocol. Either one sits behind an
//! [`Embedder`], which consults an [`EmbeddingCache`] before any provider
//! call.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{truncate_for_prompt, MetadataRecord, DEFAULT_DESCRIPTION_BUDGET};
use crate::seed::sha256_hex;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("provider returned a non-finite value")]
    NonFinite,
    #[error("embedding provider unreachable: {0}")]
    Unreachable(String),
    #[error("embedding provider rejected input: {0}")]
    Rejected(String),
    #[error("record {record_id}: {source}")]
    Record {
        record_id: String,
        #[source]
        source: Box<EmbeddingError>,
    },
    #[error("embedding cache io: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            values,
            provider_id: provider_id.into(),
            model_id: model_id.into(),
        }
    }

    /// Convenience for tests and ad hoc vectors.
    pub fn raw(values: Vec<f64>) -> Self {
        Self::new(values, "raw", "raw")
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A source of embeddings. Implementations must return vectors of one fixed
/// dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;
}

/// Feature hashing of lowercased character 3- to 5-grams into a fixed number
/// of buckets, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingProvider {
    dim: usize,
    model_id: String,
}

impl HashingProvider {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            model_id: format!("char3-5-fnv1a-{dim}"),
        }
    }
}

impl Default for HashingProvider {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

fn fnv1a(chars: &[char]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 4];
    for ch in chars {
        for byte in ch.encode_utf8(&mut buf).bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}

impl EmbeddingProvider for HashingProvider {
    fn provider_id(&self) -> &str {
        "hashing"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        if chars.iter().all(|c| c.is_whitespace()) {
            return Err(EmbeddingError::EmptyText);
        }
        let mut values = vec![0.0; self.dim];
        if chars.len() < 3 {
            values[(fnv1a(&chars) % self.dim as u64) as usize] += 1.0;
        }
        for n in 3..=5 {
            for gram in chars.windows(n) {
                values[(fnv1a(gram) % self.dim as u64) as usize] += 1.0;
            }
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        Ok(values)
    }
}

/// Client for `POST {base_url}/embeddings`.
pub struct OpenAiEmbeddingProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    model_id: String,
    api_key: Option<String>,
}

impl OpenAiEmbeddingProvider {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>, api_key: Option<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client");
        Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model_id: model_id.into(),
            api_key,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for OpenAiEmbeddingProvider {
    fn provider_id(&self) -> &str {
        "openai"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut request = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&serde_json::json!({ "model": self.model_id, "input": text }));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| EmbeddingError::Unreachable(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| EmbeddingError::Unreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbeddingError::Rejected(format!("HTTP {status}: {body}")));
        }
        let parsed: EmbeddingsResponse =
            serde_json::from_str(&body).map_err(|e| EmbeddingError::Rejected(format!("{e}: {body}")))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| EmbeddingError::Rejected(format!("no embedding in reply: {body}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCacheEntry {
    pub key: String,
    pub provider_id: String,
    pub model_id: String,
    pub dim: usize,
    pub values: Vec<f64>,
    #[serde(default)]
    pub created_at: u64,
}

/// Whitespace-collapsed form of the text that is both hashed and embedded.
pub fn normalize_input(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn cache_key(provider_id: &str, model_id: &str, normalized_text: &str) -> String {
    let payload = serde_json::to_vec(&(provider_id, model_id, normalized_text)).expect("key serializes");
    sha256_hex(&payload)
}

/// In-memory map optionally mirrored to an append-only JSONL file.
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, EmbeddingCacheEntry>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            file: None,
            path: None,
        }
    }

    /// Opens (or creates) `dir/embeddings.jsonl`. Unreadable trailing lines
    /// from an interrupted write are ignored.
    pub fn open(dir: &Path) -> Result<Self, EmbeddingError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("embeddings.jsonl");
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                match serde_json::from_str::<EmbeddingCacheEntry>(&line) {
                    Ok(entry) => {
                        entries.entry(entry.key.clone()).or_insert(entry);
                    }
                    Err(e) => log::warn!("ignoring unreadable embedding cache line: {e}"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<EmbeddingCacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    /// Stores an entry unless the key is already present. Returns the entry
    /// that is in the cache afterwards.
    pub fn insert(&self, entry: EmbeddingCacheEntry) -> Result<EmbeddingCacheEntry, EmbeddingError> {
        let mut entries = self.entries.write().expect("cache lock");
        if let Some(existing) = entries.get(&entry.key) {
            return Ok(existing.clone());
        }
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            let mut file = file.lock().expect("cache file lock");
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        entries.insert(entry.key.clone(), entry.clone());
        Ok(entry)
    }
}

/// A provider fronted by a cache, counting the calls that reach the provider.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<EmbeddingCache>,
    provider_calls: AtomicUsize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: Arc<EmbeddingCache>) -> Self {
        Self {
            provider,
            cache,
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn offline() -> Self {
        Self::new(Arc::new(HashingProvider::default()), Arc::new(EmbeddingCache::in_memory()))
    }

    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let normalized = normalize_input(text);
        if normalized.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let provider_id = self.provider.provider_id();
        let model_id = self.provider.model_id();
        let key = cache_key(provider_id, model_id, &normalized);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(EmbeddingVector::new(hit.values, hit.provider_id, hit.model_id));
        }

        self.provider_calls.fetch_add(1, Ordering::SeqCst);
        let values = self.provider.embed_text(&normalized)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let stored = self.cache.insert(EmbeddingCacheEntry {
            key,
            provider_id: provider_id.to_string(),
            model_id: model_id.to_string(),
            dim: values.len(),
            values,
            created_at,
        })?;
        Ok(EmbeddingVector::new(stored.values, stored.provider_id, stored.model_id))
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    cosine_values(&a.values, &b.values)
}

pub(crate) fn cosine_values(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot / (norm_a.sqrt() * norm_b.sqrt())).clamp(-1.0, 1.0))
}

/// Ids of the `k` pool entries most similar to `query`, by descending
/// cosine with ties broken by ascending id.
pub fn top_k_relevant(
    query: &EmbeddingVector,
    pool: &[(String, EmbeddingVector)],
    k: usize,
) -> Result<Vec<String>, EmbeddingError> {
    let mut scored = pool
        .iter()
        .map(|(id, v)| cosine(query, v).map(|s| (s, id)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|(sa, ia), (sb, ib)| sb.total_cmp(sa).then_with(|| ia.cmp(ib)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.clone()).collect())
}

/// Which record fields feed the embedded text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldPolicy {
    pub include_description: bool,
    pub description_budget: usize,
}

impl Default for FieldPolicy {
    fn default() -> Self {
        Self {
            include_description: true,
            description_budget: DEFAULT_DESCRIPTION_BUDGET,
        }
    }
}

impl FieldPolicy {
    /// Title, newline, truncated description.
    pub fn text_for(&self, record: &MetadataRecord) -> String {
        if !self.include_description || record.description.is_empty() {
            return record.title.clone();
        }
        format!(
            "{}\n{}",
            record.title,
            truncate_for_prompt(&record.description, self.description_budget)
        )
    }
}

pub type DemoIndex = Vec<(String, EmbeddingVector)>;

/// Embeds every pool record, in pool order.
pub fn build_demo_index(
    pool: &[MetadataRecord],
    embedder: &Embedder,
    policy: &FieldPolicy,
) -> Result<DemoIndex, EmbeddingError> {
    pool.iter()
        .map(|record| {
            embedder
                .embed(&policy.text_for(record))
                .map(|v| (record.id.clone(), v))
                .map_err(|e| EmbeddingError::Record {
                    record_id: record.id.clone(),
                    source: Box::new(e),
                })
        })
        .collect()
}
