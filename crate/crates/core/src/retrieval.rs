//! Skill-based retrieval of evaluation instances, with question-embedding
//! and attribute baselines, and precision@k evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::parse_skill_list;
use crate::gateway::{CachedEmbedder, ChatRequest, GatewayError};
use crate::model::{Corpus, EvaluationInstance};
use crate::prompts::PromptSet;
use crate::skillspace::dot;
use crate::validation::{parse_verdicts, skill_check_request};
use crate::Embedding;

pub const ATTRIBUTES_FILE: &str = "attributes.jsonl";
pub const REPORT_FILE: &str = "retrieval.jsonl";

/// How many of the best similarities are averaged.
pub const TOP_SIMILARITIES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no relevance judgment for {0}")]
    MissingJudgment(String),
    #[error("nothing was retrieved")]
    EmptyRetrieval,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Skills,
    QuestionEmbedding,
    Attributes,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Skills, Method::QuestionEmbedding, Method::Attributes];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkFilter {
    Include(BTreeSet<String>),
    Exclude(BTreeSet<String>),
}

impl BenchmarkFilter {
    pub fn admits(&self, benchmark: &str) -> bool {
        match self {
            BenchmarkFilter::Include(b) => b.contains(benchmark),
            BenchmarkFilter::Exclude(b) => !b.contains(benchmark),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub skill: String,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_filter: Option<BenchmarkFilter>,
    pub method: Method,
}

impl RetrievalQuery {
    pub fn new(skill: impl Into<String>, method: Method) -> Self {
        Self {
            skill: skill.into(),
            k: 20,
            corpus_filter: None,
            method,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_filter(mut self, filter: BenchmarkFilter) -> Self {
        self.corpus_filter = Some(filter);
        self
    }
}

/// Mean of the `TOP_SIMILARITIES` largest values, or of all of them when
/// there are fewer.
pub fn top_mean(sims: &[f64]) -> Option<f64> {
    if sims.is_empty() {
        return None;
    }
    let mut s = sims.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s.truncate(TOP_SIMILARITIES);
    Some(s.iter().sum::<f64>() / s.len() as f64)
}

fn top_mean_against(query: &Embedding, targets: &[Embedding]) -> Option<f64> {
    let sims: Vec<f64> = targets.iter().map(|t| dot(query.as_slice(), t.as_slice())).collect();
    top_mean(&sims)
}

pub fn score_by_skills(query: &Embedding, skills: &[Embedding]) -> Option<f64> {
    top_mean_against(query, skills)
}

pub fn score_by_question_embedding(query: &Embedding, question: &Embedding) -> f64 {
    dot(query.as_slice(), question.as_slice())
}

pub fn score_by_attributes(query: &Embedding, attributes: &[Embedding]) -> Option<f64> {
    top_mean_against(query, attributes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttributes {
    pub instance_id: String,
    pub attributes: Vec<String>,
}

pub fn build_attribute_prompt(instance: &EvaluationInstance, prompts: &PromptSet, model: &str) -> ChatRequest {
    ChatRequest::new(model, prompts.attributes.clone(), format!("Question: {}", instance.render_question()))
        .with_image(instance.image_ref.clone())
}

pub fn parse_attributes(raw: &str, instance_id: &str) -> InstanceAttributes {
    InstanceAttributes {
        instance_id: instance_id.to_string(),
        attributes: parse_skill_list(raw, instance_id)
            .into_iter()
            .flat_map(|m| m.names)
            .collect(),
    }
}

/// Everything scoring needs for one instance, embedded once.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeatures {
    pub instance_id: String,
    pub benchmark: String,
    pub question: Embedding,
    pub skills: Vec<Embedding>,
    pub attributes: Vec<Embedding>,
}

/// Embeds each instance's question text, skills and attributes.
pub fn build_features(
    corpus: &Corpus,
    attributes: &BTreeMap<String, Vec<String>>,
    embedder: &CachedEmbedder,
) -> Result<Vec<InstanceFeatures>, GatewayError> {
    let embed = |texts: Vec<String>| -> Result<Vec<Embedding>, GatewayError> {
        let texts: Vec<String> = texts.into_iter().filter(|t| !t.trim().is_empty()).collect();
        if texts.is_empty() {
            Ok(Vec::new())
        } else {
            embedder.embed_texts(&texts)
        }
    };
    let questions = embed(corpus.instances().iter().map(|i| i.question.clone()).collect())?;
    corpus
        .instances()
        .iter()
        .zip(questions)
        .map(|(inst, question)| {
            Ok(InstanceFeatures {
                instance_id: inst.id.clone(),
                benchmark: inst.benchmark.clone(),
                question,
                skills: embed(corpus.instance_skills(&inst.id))?,
                attributes: embed(attributes.get(&inst.id).cloned().unwrap_or_default())?,
            })
        })
        .collect()
}

pub fn score(method: Method, query: &Embedding, f: &InstanceFeatures) -> Option<f64> {
    match method {
        Method::Skills => score_by_skills(query, &f.skills),
        Method::QuestionEmbedding => Some(score_by_question_embedding(query, &f.question)),
        Method::Attributes => score_by_attributes(query, &f.attributes),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    /// How many fewer than `k` scorable instances there were.
    pub shortfall: usize,
}

/// The `k` best-scoring admitted instances, ties broken by id. Instances
/// the method cannot score are skipped.
pub fn retrieve_top_k(query: &RetrievalQuery, query_embedding: &Embedding, features: &[InstanceFeatures]) -> Result<Retrieved, RetrievalError> {
    if query.k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let mut scored: Vec<(f64, &str)> = features
        .par_iter()
        .filter(|f| query.corpus_filter.as_ref().is_none_or(|flt| flt.admits(&f.benchmark)))
        .filter_map(|f| score(query.method, query_embedding, f).map(|s| (s, f.instance_id.as_str())))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    let shortfall = query.k.saturating_sub(scored.len());
    if shortfall > 0 {
        log::warn!("query {:?} ({:?}): only {} scorable instances for k = {}", query.skill, query.method, scored.len(), query.k);
    }
    scored.truncate(query.k);
    Ok(Retrieved {
        ids: scored.iter().map(|s| s.1.to_string()).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
        shortfall,
    })
}

pub fn precision_at_k(retrieved: &[String], judgments: &HashMap<String, bool>) -> Result<f64, RetrievalError> {
    if retrieved.is_empty() {
        return Err(RetrievalError::EmptyRetrieval);
    }
    let mut relevant = 0;
    for id in retrieved {
        relevant += *judgments
            .get(id)
            .ok_or_else(|| RetrievalError::MissingJudgment(id.clone()))? as usize;
    }
    Ok(relevant as f64 / retrieved.len() as f64)
}

/// The verifier request asking whether `skill` is relevant to `instance`.
pub fn build_relevance_prompt(instance: &EvaluationInstance, skill: &str, prompts: &PromptSet, verifier: &str) -> ChatRequest {
    skill_check_request(instance, [skill], prompts, verifier)
}

/// An unparseable reply counts as not relevant.
pub fn parse_relevance(raw: &str) -> bool {
    parse_verdicts(raw, 1)[0].unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub query: String,
    pub method: Method,
    pub ids: Vec<String>,
    pub precision: Option<f64>,
}
