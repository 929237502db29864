//! Turns a [`PipelineConfig`] into a ready [`Pipeline`].

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use skillslice::config::{ChatMode, EmbeddingBackendConfig, PipelineConfig};
use skillslice::gateway::{
    Cassette, CachedEmbedder, ChatBackend, Embedder, Gateway, HttpChatBackend, HttpEmbedder, RecordingBackend, ReplayBackend, ToyHashEmbedder,
};
use skillslice::pipeline::{Pipeline, RunLayout};
use skillslice::prompts::PromptSet;

use crate::simulated::{Script, SimulatedBackend};

/// A pipeline plus the cassette it records into, if any.
pub struct Assembled {
    pub pipeline: Pipeline,
    pub recording: Option<Arc<Cassette>>,
}

impl Assembled {
    /// Sorts a recorded cassette so repeated recordings diff cleanly.
    pub fn finish(&self) -> anyhow::Result<()> {
        if let Some(c) = &self.recording {
            c.compact()?;
        }
        Ok(())
    }
}

fn chat_backend(config: &PipelineConfig, mode: ChatMode, prompts: &PromptSet) -> anyhow::Result<(Arc<dyn ChatBackend>, Option<Arc<Cassette>>)> {
    let b = &config.backend;
    b.check(mode)?;
    Ok(match mode {
        ChatMode::Replay => {
            let path = b.cassette.as_ref().unwrap();
            if !path.is_file() {
                anyhow::bail!("cassette {} does not exist", path.display());
            }
            (Arc::new(ReplayBackend::new(Arc::new(Cassette::open(path)?))), None)
        }
        ChatMode::Remote => (Arc::new(HttpChatBackend::new(b.remote.clone().unwrap())), None),
        ChatMode::Simulated => {
            let script = Script::load(b.simulated_script.as_ref().unwrap())?;
            (Arc::new(SimulatedBackend::new(script, prompts)), None)
        }
        ChatMode::Record => {
            let cassette = Arc::new(Cassette::open(b.cassette.as_ref().unwrap())?);
            let (inner, _) = chat_backend(config, b.upstream(), prompts)?;
            (Arc::new(RecordingBackend::new(inner, cassette.clone())), Some(cassette))
        }
    })
}

fn embedder(config: &PipelineConfig) -> anyhow::Result<CachedEmbedder> {
    let inner: Box<dyn Embedder> = match &config.backend.embedding {
        EmbeddingBackendConfig::ToyHash { dim } => Box::new(ToyHashEmbedder::new(*dim)),
        EmbeddingBackendConfig::Remote { remote, model } => Box::new(HttpEmbedder::new(remote.clone(), model.clone())),
    };
    let dir = config.cache_dir.join("embeddings");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(CachedEmbedder::new(inner).persisted_in(dir)?)
}

pub fn assemble(config: PipelineConfig, out_dir: &Path, run_id: &str) -> anyhow::Result<Assembled> {
    let prompts = match &config.prompt_dir {
        Some(d) => PromptSet::load(d)?,
        None => PromptSet::default(),
    };
    let (backend, recording) = chat_backend(&config, config.backend.mode, &prompts)?;
    let gateway = Gateway::new(backend).with_concurrency(config.concurrency);
    let embedder = embedder(&config)?;
    Ok(Assembled {
        pipeline: Pipeline {
            prompts,
            gateway,
            embedder,
            layout: RunLayout::new(out_dir, run_id),
            config,
        },
        recording,
    })
}
