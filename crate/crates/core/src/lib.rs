//! Skill-slice discovery and analysis for LLM evaluation corpora.
//!
//! The pipeline infers the skills each evaluation instance exercises by
//! parsing model-written rationales, de-duplicates them into a skill index,
//! and turns the index into overlapping *skill-slices*. Slices then drive
//! model comparison, relevance verification, per-instance routing,
//! self-consistency probing and skill-based retrieval.
//!
//! Numeric routines are generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below pin the `f64` flavour the pipeline uses end to end.

pub mod annotator;
pub mod config;
pub mod error;
pub mod gateway;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod probing;
pub mod prompts;
pub mod retrieval;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod skillspace;
pub mod slicing;
pub mod stats;
pub mod validation;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Unit-normalised embedding at pipeline precision.
pub type Embedding = gateway::EmbeddingVector<f64>;
/// Single-precision embedding, for memory-bound similarity work.
pub type EmbeddingF32 = gateway::EmbeddingVector<f32>;
/// Skill-name to embedding lookup at pipeline precision.
pub type SkillEmbeddings = skillspace::EmbeddingTable<f64>;
/// Cluster identifier inside a [`skillspace::SkillIndex`].
pub type ClusterId = u32;
