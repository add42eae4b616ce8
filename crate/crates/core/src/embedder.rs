//! Text embedding providers: a dependency-free hashed bag-of-tokens encoder
//! and a cached client for remote embedding endpoints.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::PathBuf;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::Item;
use crate::http::{post_json, HttpError, RetryPolicy};
use crate::util::seeded_hash;

pub const DEFAULT_DIM: usize = 256;
/// Published seeds of the two hash functions (bucket, sign).
pub const HASH_SEEDS: (u64, u64) = (0x5eed_0001_c0ff_ee11, 0x5eed_0002_bad5_eed5);

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Http(#[from] HttpError),
    #[error("remote returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("embedding cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the provider configuration; models refuse inputs from a different one.
    fn fingerprint(&self) -> String;

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError>;

    fn embed_item(&self, item: &Item) -> Result<Embedding, EmbedError> {
        self.embed_text(&item.embedding_text())
    }
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Feature-hashing encoder: each token adds ±1 at a hashed bucket, then the
/// vector is L2-normalized (left at zero when there are no tokens).
#[derive(Debug, Clone)]
pub struct HashedProvider {
    dim: usize,
}

impl HashedProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashedProvider {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashedProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hashed-v1/d{}/{:016x}-{:016x}", self.dim, HASH_SEEDS.0, HASH_SEEDS.1)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text) {
            let bucket = seeded_hash(token.as_bytes(), HASH_SEEDS.0) % self.dim as u64;
            let sign = if seeded_hash(token.as_bytes(), HASH_SEEDS.1) & 1 == 0 { 1.0 } else { -1.0 };
            values[bucket as usize] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Embedding { values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbeddingConfig {
    pub url: String,
    pub model: String,
    pub dim: usize,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_token_env() -> String {
    "RECRITIC_EMBED_TOKEN".into()
}

type CacheKey = [u8; 32];

/// Client for `POST {model, input: [text]}` → `{data: [{embedding: [...]}]}`
/// endpoints. Responses are stored as f32 in memory and, optionally, in an
/// append-only cache file of `(sha256(text), u32 len, len × f32)` records,
/// all little-endian.
pub struct RemoteProvider {
    config: RemoteEmbeddingConfig,
    token: Option<String>,
    cache: RwLock<HashMap<CacheKey, Vec<f32>>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

impl RemoteProvider {
    pub fn new(config: RemoteEmbeddingConfig) -> Result<Self, EmbedError> {
        let token = std::env::var(&config.token_env).ok();
        let mut cache = HashMap::new();
        let mut sink = None;
        if let Some(path) = &config.cache_path {
            let cache_err = |source| EmbedError::Cache { path: path.display().to_string(), source };
            if path.exists() {
                let mut bytes = Vec::new();
                File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(cache_err)?;
                cache = decode_cache(&bytes);
            }
            let file = OpenOptions::new().create(true).append(true).open(path).map_err(cache_err)?;
            sink = Some(BufWriter::new(file));
        }
        Ok(Self { config, token, cache: RwLock::new(cache), sink: Mutex::new(sink) })
    }

    fn key(text: &str) -> CacheKey {
        Sha256::digest(text.as_bytes()).into()
    }

    fn fetch(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let body = json!({ "model": self.config.model, "input": [text] });
        let resp = post_json(&self.config.url, self.token.as_deref(), &body, &self.config.retry)?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Malformed("missing data[0].embedding".into()))?;
        let vector: Vec<f32> = values
            .iter()
            .map(|v| v.as_f64().map(|x| x as f32))
            .collect::<Option<_>>()
            .ok_or_else(|| EmbedError::Malformed("non-numeric embedding entry".into()))?;
        if vector.len() != self.config.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.config.dim, got: vector.len() });
        }
        Ok(vector)
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

fn decode_cache(bytes: &[u8]) -> HashMap<CacheKey, Vec<f32>> {
    let mut out = HashMap::new();
    let mut rest = bytes;
    while rest.len() >= 36 {
        let key: CacheKey = rest[..32].try_into().expect("32 bytes");
        let len = u32::from_le_bytes(rest[32..36].try_into().expect("4 bytes")) as usize;
        let end = 36 + len * 4;
        if rest.len() < end {
            log::warn!("embedding cache truncated, ignoring trailing record");
            break;
        }
        let values = rest[36..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.insert(key, values);
        rest = &rest[end..];
    }
    out
}

fn encode_record(key: &CacheKey, values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(36 + values.len() * 4);
    buf.extend_from_slice(key);
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn fingerprint(&self) -> String {
        format!("remote/{}/d{}", self.config.model, self.config.dim)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        let key = Self::key(text);
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Embedding::new(v.iter().map(|&x| f64::from(x)).collect());
        }
        let vector = self.fetch(text)?;
        let embedding = Embedding::new(vector.iter().map(|&x| f64::from(x)).collect())?;
        if let Some(sink) = self.sink.lock().expect("sink lock").as_mut() {
            let path = || self.config.cache_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            sink.write_all(&encode_record(&key, &vector))
                .and_then(|_| sink.flush())
                .map_err(|source| EmbedError::Cache { path: path(), source })?;
        }
        self.cache.write().expect("cache lock").insert(key, vector);
        Ok(embedding)
    }
}
