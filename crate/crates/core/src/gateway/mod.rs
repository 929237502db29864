//! Uniform access to chat-completion and embedding backends.
//!
//! Every chat request is keyed by a SHA-256 digest of its canonical JSON
//! (sorted keys, all fields). The replay backend answers purely from that
//! digest, which makes every pipeline stage runnable offline and
//! byte-reproducible.

mod cassette;
mod embed;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{Cassette, CassetteEntry, RecordingBackend, ReplayBackend};
pub use embed::{
    CachedEmbedder, Embedder, EmbeddingVector, TableEmbedder, ToyHashEmbedder,
};
pub use remote::{HttpChatBackend, HttpEmbedder, RemoteConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("no scripted response for request digest {digest} (model {model})")]
    FixtureMiss { digest: String, model: String },
    #[error("backend returned {got} responses, request asked for {want}")]
    SampleCount { want: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
    #[error("cassette i/o: {0}")]
    Io(String),
}

impl GatewayError {
    /// Transport failures, 5xx and 429 are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub image_ref: Option<String>,
    pub temperature: f64,
    pub n_samples: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            image_ref: None,
            temperature: 0.0,
            n_samples: 1,
        }
    }

    pub fn with_image(mut self, image_ref: Option<String>) -> Self {
        self.image_ref = image_ref;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the request's canonical JSON.
    pub fn digest(&self) -> String {
        // serde_json::Value objects are BTreeMap-backed, so keys come out sorted.
        let canonical = serde_json::to_value(self)
            .and_then(|v| serde_json::to_string(&v))
            .expect("request serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Anything that can answer a chat request with `n_samples` responses.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        (**self).complete(req)
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Bounded exponential backoff on retryable failures.
#[derive(Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub sleep: Sleeper,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
            sleep: Arc::new(std::thread::sleep),
        }
    }
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("attempts", &self.attempts)
            .field("base_delay", &self.base_delay)
            .finish()
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let attempts = self.attempts.max(1);
        let mut delay = self.base_delay;
        for attempt in 1..=attempts {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}; retrying in {delay:?}");
                    (self.sleep)(delay);
                    delay *= 2;
                }
                Err(e) if e.is_retryable() => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}

/// Shareable chat front end: validation, retries and a concurrency bound.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    concurrency: usize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            concurrency: 8,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn complete_chat(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        req.validate()?;
        let out = self.retry.run(|| self.backend.complete(req))?;
        if out.len() != req.n_samples as usize {
            return Err(GatewayError::SampleCount {
                want: req.n_samples as usize,
                got: out.len(),
            });
        }
        Ok(out)
    }

    /// Completes every request with at most `concurrency` in flight.
    /// Results come back in request order.
    pub fn complete_all(&self, reqs: &[ChatRequest]) -> Vec<Result<Vec<String>, GatewayError>> {
        self.map_bounded(reqs, |r| self.complete_chat(r))
    }

    /// Runs `f` over `items` on up to `concurrency` worker threads,
    /// preserving input order in the output.
    pub fn map_bounded<I: Sync, O: Send>(&self, items: &[I], f: impl Fn(&I) -> O + Sync) -> Vec<O> {
        let workers = self.concurrency.min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let out = f(&items[i]);
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}
