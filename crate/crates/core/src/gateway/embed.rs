use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, RetryPolicy};
use crate::model::skill_key;
use crate::scalar::Scalar;

/// Fixed-length vector of finite floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Wraps `values` as-is, rejecting empty or non-finite input.
    pub fn new(values: Vec<T>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::InvalidEmbedding("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidEmbedding("non-finite component".into()));
        }
        Ok(Self { values })
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<T>) -> Result<Self, GatewayError> {
        let v = Self::new(values)?;
        let norm = v.norm();
        if norm == T::zero() {
            return Err(GatewayError::InvalidEmbedding("zero vector".into()));
        }
        Ok(Self {
            values: v.values.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector {
            values: self
                .values
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// A text-embedding provider. Implementations return unit vectors.
pub trait Embedder: Send + Sync {
    /// Stable identifier recorded in the skill index.
    fn id(&self) -> String;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, GatewayError>;
}

/// Deterministic offline embedder: a signed bag of hashed lowercase word
/// tokens in `dim` buckets, unit-normalised.
///
/// Texts with the same multiset of words embed identically; disjoint
/// vocabularies are near-orthogonal.
#[derive(Debug, Clone)]
pub struct ToyHashEmbedder {
    dim: usize,
}

impl ToyHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector<f64> {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(lower.as_str());
        }
        let mut values = vec![0.0f64; self.dim];
        for t in tokens {
            let h = Sha256::digest(t.as_bytes());
            let word = u64::from_le_bytes(h[..8].try_into().unwrap());
            let idx = (word % self.dim as u64) as usize;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            values[idx] += sign;
        }
        // Colliding opposite signs can cancel out entirely.
        if values.iter().all(|v| *v == 0.0) {
            values[0] = 1.0;
        }
        EmbeddingVector::normalized(values).expect("non-zero by construction")
    }
}

impl Default for ToyHashEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl Embedder for ToyHashEmbedder {
    fn id(&self) -> String {
        format!("toy-hash-{}", self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Fixed text -> vector table (keys compared case-insensitively), falling
/// back to another embedder for unknown texts.
pub struct TableEmbedder {
    table: HashMap<String, EmbeddingVector<f64>>,
    fallback: Option<Box<dyn Embedder>>,
}

impl TableEmbedder {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self, GatewayError> {
        let table = entries
            .into_iter()
            .map(|(k, v)| Ok((skill_key(&k), EmbeddingVector::normalized(v)?)))
            .collect::<Result<_, GatewayError>>()?;
        Ok(Self {
            table,
            fallback: None,
        })
    }

    pub fn with_fallback(mut self, fallback: Box<dyn Embedder>) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl Embedder for TableEmbedder {
    fn id(&self) -> String {
        match &self.fallback {
            Some(f) => format!("table+{}", f.id()),
            None => "table".to_string(),
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, GatewayError> {
        texts
            .iter()
            .map(|t| match (self.table.get(&skill_key(t)), &self.fallback) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(f)) => Ok(f.embed_batch(std::slice::from_ref(t))?.remove(0)),
                (None, None) => Err(GatewayError::InvalidEmbedding(format!("no table entry for {t:?}"))),
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    text: String,
    vector: Vec<f64>,
}

/// Memoising front for any embedder, optionally persisted as JSONL.
///
/// Cache hits return bit-identical vectors. Reads are concurrent; misses
/// are fetched and written under a single lock.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    cache: RwLock<HashMap<String, EmbeddingVector<f64>>>,
    persist: Option<(PathBuf, Mutex<()>)>,
    retry: RetryPolicy,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn Embedder>) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
            persist: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Loads and appends to `<dir>/embeddings-<embedder id>.jsonl`.
    pub fn persisted_in(mut self, dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        let safe: String = self
            .inner
            .id()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let path = dir.join(format!("embeddings-{safe}.jsonl"));
        if path.exists() {
            let f = fs::File::open(&path).map_err(|e| GatewayError::Io(e.to_string()))?;
            let mut cache = self.cache.write().unwrap();
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| GatewayError::Io(e.to_string()))?;
                // A torn last line from an interrupted run is simply dropped.
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    cache.insert(entry.text, EmbeddingVector::new(entry.vector)?);
                }
            }
        }
        self.persist = Some((path, Mutex::new(())));
        Ok(self)
    }

    pub fn id(&self) -> String {
        self.inner.id()
    }

    /// One unit vector per text, in input order.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
        }
        let missing: Vec<String> = {
            let cache = self.cache.read().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fetched = self.retry.run(|| self.inner.embed_batch(&missing))?;
            if fetched.len() != missing.len() {
                return Err(GatewayError::Malformed(format!(
                    "asked for {} embeddings, got {}",
                    missing.len(),
                    fetched.len()
                )));
            }
            let mut cache = self.cache.write().unwrap();
            let mut lines = String::new();
            for (t, v) in missing.into_iter().zip(fetched) {
                if cache.contains_key(&t) {
                    continue;
                }
                if self.persist.is_some() {
                    lines.push_str(
                        &serde_json::to_string(&CacheLine {
                            text: t.clone(),
                            vector: v.as_slice().to_vec(),
                        })
                        .expect("cache line serialises"),
                    );
                    lines.push('\n');
                }
                cache.insert(t, v);
            }
            if let Some((path, lock)) = &self.persist {
                let _g = lock.lock().unwrap();
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| GatewayError::Io(e.to_string()))?;
                }
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::Io(e.to_string()))?;
                f.write_all(lines.as_bytes())
                    .map_err(|e| GatewayError::Io(e.to_string()))?;
            }
        }
        let cache = self.cache.read().unwrap();
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}
