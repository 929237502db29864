//! Pipeline configuration, read from a single JSON file.
//!
//! Relative paths inside the file are resolved against the file's own
//! directory by [`PipelineConfig::load`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::RemoteConfig;
use crate::probing::{ConsistencyRules, ProbeLimits, SamplingParams};
use crate::retrieval::Method;

/// Where chat completions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatMode {
    /// Answers only from the recorded cassette.
    Replay,
    /// Proxies the upstream backend and appends new responses to the cassette.
    Record,
    Remote,
    /// Offline rule-based stand-in driven by a script file.
    Simulated,
}

impl std::str::FromStr for ChatMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown backend {s:?} (expected replay, record, remote or simulated)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingBackendConfig {
    ToyHash {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote {
        #[serde(flatten)]
        remote: RemoteConfig,
        model: String,
    },
}

fn default_dim() -> usize {
    256
}

impl Default for EmbeddingBackendConfig {
    fn default() -> Self {
        EmbeddingBackendConfig::ToyHash { dim: default_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: ChatMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_script: Option<PathBuf>,
    /// What `record` mode proxies: `remote` or `simulated`. Defaults to
    /// `remote` when an endpoint is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_upstream: Option<ChatMode>,
    #[serde(default)]
    pub embedding: EmbeddingBackendConfig,
}

impl BackendConfig {
    pub fn upstream(&self) -> ChatMode {
        self.record_upstream.unwrap_or(if self.remote.is_some() {
            ChatMode::Remote
        } else {
            ChatMode::Simulated
        })
    }

    /// Checks that `mode` has everything it needs.
    pub fn check(&self, mode: ChatMode) -> Result<()> {
        let missing = |what: &str| Err(Error::Config(format!("backend mode {mode:?} needs backend.{what}")));
        match mode {
            ChatMode::Replay if self.cassette.is_none() => missing("cassette"),
            ChatMode::Remote if self.remote.is_none() => missing("remote"),
            ChatMode::Simulated if self.simulated_script.is_none() => missing("simulated_script"),
            ChatMode::Record => {
                if self.cassette.is_none() {
                    return missing("cassette");
                }
                match self.upstream() {
                    ChatMode::Remote | ChatMode::Simulated => self.check(self.upstream()),
                    other => Err(Error::Config(format!("record_upstream cannot be {other:?}"))),
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Writes rationales and attribute lists.
    pub annotator: String,
    /// Models whose answers are graded and sliced.
    pub answerers: Vec<String>,
    pub verifiers: Vec<String>,
    pub probe_generator: String,
    pub judge: String,
    /// Routing fallback; must be one of `answerers`.
    pub default_route: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub cluster: f64,
    pub negative_tau: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub min_slice: usize,
    pub dedup_residual: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            cluster: 0.95,
            negative_tau: 0.85,
            match_: 0.85,
            min_slice: 100,
            dedup_residual: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbingConfig {
    pub per_group: usize,
    pub limits: ProbeLimits,
    pub sampling: SamplingParams,
    pub rules: ConsistencyRules,
    pub accuracy_threshold: f64,
    pub inconsistency_threshold: f64,
}

impl Default for ProbingConfig {
    fn default() -> Self {
        Self {
            per_group: 20,
            limits: ProbeLimits::default(),
            sampling: SamplingParams::default(),
            rules: ConsistencyRules::default(),
            accuracy_threshold: 0.5,
            inconsistency_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub queries: Vec<String>,
    pub k: usize,
    pub methods: Vec<Method>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            queries: Vec::new(),
            k: 20,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub models: ModelConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Overrides for the built-in prompt templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub probing: ProbingConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from(".skillslice-cache")
}

fn default_concurrency() -> usize {
    8
}

fn default_batch() -> usize {
    64
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.backend.cassette, &mut self.backend.simulated_script, &mut self.prompt_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.cache_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.backend.check(self.backend.mode)?;
        let t = &self.thresholds;
        unit_interval("thresholds.cluster", t.cluster)?;
        unit_interval("thresholds.negative_tau", t.negative_tau)?;
        unit_interval("thresholds.match", t.match_)?;
        unit_interval("thresholds.dedup_residual", t.dedup_residual)?;
        if t.min_slice < 1 {
            return Err(Error::Config("thresholds.min_slice must be at least 1".into()));
        }
        let m = &self.models;
        if m.answerers.is_empty() {
            return Err(Error::Config("models.answerers is empty".into()));
        }
        if m.verifiers.is_empty() {
            return Err(Error::Config("models.verifiers is empty".into()));
        }
        if !m.answerers.contains(&m.default_route) {
            return Err(Error::Config(format!(
                "models.default_route {:?} is not among the answerers",
                m.default_route
            )));
        }
        if self.concurrency == 0 || self.batch_size == 0 {
            return Err(Error::Config("concurrency and batch_size must be positive".into()));
        }
        if self.retrieval.k == 0 {
            return Err(Error::Config("retrieval.k must be at least 1".into()));
        }
        let p = &self.probing;
        if p.per_group == 0 || p.sampling.samples == 0 || p.limits.min_claims > p.limits.max_claims {
            return Err(Error::Config("invalid probing settings".into()));
        }
        Ok(())
    }
}
