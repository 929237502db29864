//! Post-hoc verification of annotated skills against similarity-bounded
//! negative controls, and agreement between annotators.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ChatRequest;
use crate::model::{skill_key, EvaluationInstance};
use crate::prompts::PromptSet;
use crate::skillspace::{EmbeddingTable, SkillspaceError};
use crate::stats;

pub const RESULTS_FILE: &str = "verification_results.jsonl";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("no eligible negative skills for {0}")]
    NoEligibleNegatives(String),
    #[error("{positives} positives but {negatives} negatives")]
    CountMismatch { positives: usize, negatives: usize },
    #[error("item {skill:?} for {instance_id} has no verdict")]
    UnsetVerdict { instance_id: String, skill: String },
    #[error(transparent)]
    Embedding(#[from] SkillspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationItem {
    pub instance_id: String,
    pub skill: String,
    pub is_negative: bool,
    pub verdict: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<String>,
}

/// Corpus skills whose best similarity to any of `instance_skills` is at
/// most `tau`. Skills of the instance itself are never eligible. Output
/// follows `corpus_skills` order.
pub fn eligible_negatives(
    instance_skills: &[String],
    corpus_skills: &[String],
    embeddings: &EmbeddingTable<f64>,
    tau: f64,
) -> Result<Vec<String>, SkillspaceError> {
    let own: BTreeSet<String> = instance_skills.iter().map(|s| skill_key(s)).collect();
    let mut out = Vec::new();
    for s in corpus_skills {
        if own.contains(&skill_key(s)) {
            continue;
        }
        match embeddings.max_similarity(s, instance_skills)? {
            Some(m) if m > tau => {}
            _ => out.push(s.clone()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub skills: Vec<String>,
    /// How many fewer than requested were available.
    pub shortfall: usize,
}

/// `k` draws without replacement from the eligible set.
pub fn sample_negatives<R: Rng + ?Sized>(
    instance_id: &str,
    instance_skills: &[String],
    corpus_skills: &[String],
    embeddings: &EmbeddingTable<f64>,
    tau: f64,
    k: usize,
    rng: &mut R,
) -> Result<NegativeSample, ValidationError> {
    let eligible = eligible_negatives(instance_skills, corpus_skills, embeddings, tau)?;
    if eligible.is_empty() {
        return Err(ValidationError::NoEligibleNegatives(instance_id.to_string()));
    }
    let shortfall = k.saturating_sub(eligible.len());
    if shortfall > 0 {
        log::warn!("{instance_id}: only {} eligible negatives for {k} requested", eligible.len());
    }
    Ok(NegativeSample {
        skills: eligible.choose_multiple(rng, k).cloned().collect(),
        shortfall,
    })
}

/// Mixes positives and negatives into one shuffled, numbered list. The
/// returned items are in the order shown to the verifier.
pub fn build_verification_prompt<R: Rng + ?Sized>(
    instance: &EvaluationInstance,
    positives: &[String],
    negatives: &[String],
    prompts: &PromptSet,
    verifier: &str,
    rng: &mut R,
) -> Result<(ChatRequest, Vec<VerificationItem>), ValidationError> {
    if positives.len() != negatives.len() {
        return Err(ValidationError::CountMismatch {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let mut items: Vec<VerificationItem> = positives
        .iter()
        .map(|s| (s, false))
        .chain(negatives.iter().map(|s| (s, true)))
        .map(|(s, neg)| VerificationItem {
            instance_id: instance.id.clone(),
            skill: s.clone(),
            is_negative: neg,
            verdict: None,
            verifier: Some(verifier.to_string()),
        })
        .collect();
    items.shuffle(rng);
    let req = skill_check_request(instance, items.iter().map(|i| i.skill.as_str()), prompts, verifier);
    Ok((req, items))
}

/// The verifier request for an arbitrary skill list, in the given order.
pub fn skill_check_request<'a>(
    instance: &EvaluationInstance,
    skills: impl IntoIterator<Item = &'a str>,
    prompts: &PromptSet,
    verifier: &str,
) -> ChatRequest {
    let mut user = format!("Question: {}\n\nSkills:\n", instance.render_question());
    for (i, s) in skills.into_iter().enumerate() {
        user.push_str(&format!("{}. {s}\n", i + 1));
    }
    ChatRequest::new(verifier, prompts.verify.clone(), user.trim_end()).with_image(instance.image_ref.clone())
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*]\s*)?(\d+)\s*[.):\-]\s*(.*)$").unwrap());
static YES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|true)\b").unwrap());
static NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(no|false)\b").unwrap());

/// Verdicts for items 1..=n. Lines look like `3. RELEVANT`; a line without
/// either keyword falls back to yes/no words. Unmatched items are `None`;
/// the first verdict for a number wins.
pub fn parse_verdicts(raw: &str, n: usize) -> Vec<Option<bool>> {
    let mut out = vec![None; n];
    for line in raw.lines() {
        let line = line.replace(['*', '_', '`'], "");
        let Some(c) = NUMBERED.captures(&line) else {
            continue;
        };
        let Ok(i) = c[1].parse::<usize>() else {
            continue;
        };
        if i == 0 || i > n || out[i - 1].is_some() {
            continue;
        }
        let rest = c[2].to_uppercase();
        out[i - 1] = if rest.contains("IRRELEVANT") || rest.contains("NOT RELEVANT") {
            Some(false)
        } else if rest.contains("RELEVANT") {
            Some(true)
        } else {
            match (YES.find(&rest), NO.find(&rest)) {
                (Some(_), None) => Some(true),
                (None, Some(_)) => Some(false),
                (Some(y), Some(n)) => Some(y.start() < n.start()),
                (None, None) => None,
            }
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyMetrics {
    /// P(relevant | positive); `None` without positives.
    pub relevancy_rate: Option<f64>,
    /// P(relevant | negative); `None` without negatives.
    pub false_positive_rate: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    /// Keyed "correct" / "incorrect" by the annotator's correctness on the
    /// underlying instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_correctness: Option<BTreeMap<String, RelevancyMetrics>>,
}

fn rate(items: &[&VerificationItem], negative: bool) -> (Option<f64>, usize) {
    let sel: Vec<bool> = items
        .iter()
        .filter(|i| i.is_negative == negative)
        .map(|i| i.verdict.unwrap())
        .collect();
    let r = (!sel.is_empty()).then(|| sel.iter().filter(|&&v| v).count() as f64 / sel.len() as f64);
    (r, sel.len())
}

fn metrics_of(items: &[&VerificationItem]) -> RelevancyMetrics {
    let (relevancy_rate, positives) = rate(items, false);
    let (false_positive_rate, negatives) = rate(items, true);
    RelevancyMetrics {
        relevancy_rate,
        false_positive_rate,
        positives,
        negatives,
        by_correctness: None,
    }
}

/// Micro-averaged over items. With `correctness`, also split by whether the
/// annotator answered the instance correctly (instances it did not answer
/// are left out of the split).
pub fn relevancy_metrics(
    items: &[VerificationItem],
    correctness: Option<&HashMap<&str, bool>>,
) -> Result<RelevancyMetrics, ValidationError> {
    if let Some(i) = items.iter().find(|i| i.verdict.is_none()) {
        return Err(ValidationError::UnsetVerdict {
            instance_id: i.instance_id.clone(),
            skill: i.skill.clone(),
        });
    }
    let all: Vec<&VerificationItem> = items.iter().collect();
    let mut m = metrics_of(&all);
    if let Some(c) = correctness {
        let mut split = BTreeMap::new();
        for (key, want) in [("correct", true), ("incorrect", false)] {
            let part: Vec<&VerificationItem> = items
                .iter()
                .filter(|i| c.get(i.instance_id.as_str()) == Some(&want))
                .collect();
            split.insert(key.to_string(), metrics_of(&part));
        }
        m.by_correctness = Some(split);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierSummary {
    pub per_verifier: BTreeMap<String, RelevancyMetrics>,
    pub mean_relevancy_rate: Option<f64>,
    pub mean_false_positive_rate: Option<f64>,
}

/// Metrics per verifier model and their unweighted means. Items without a
/// verifier are grouped under "".
pub fn summarize_verifiers(
    items: &[VerificationItem],
    correctness: Option<&HashMap<&str, bool>>,
) -> Result<VerifierSummary, ValidationError> {
    let mut groups: BTreeMap<String, Vec<VerificationItem>> = BTreeMap::new();
    for i in items {
        groups.entry(i.verifier.clone().unwrap_or_default()).or_default().push(i.clone());
    }
    let per_verifier = groups
        .into_iter()
        .map(|(v, its)| Ok((v, relevancy_metrics(&its, correctness)?)))
        .collect::<Result<BTreeMap<_, _>, ValidationError>>()?;
    let mean_of = |f: fn(&RelevancyMetrics) -> Option<f64>| {
        let xs: Vec<f64> = per_verifier.values().filter_map(f).collect();
        stats::mean(&xs)
    };
    Ok(VerifierSummary {
        mean_relevancy_rate: mean_of(|m| m.relevancy_rate),
        mean_false_positive_rate: mean_of(|m| m.false_positive_rate),
        per_verifier,
    })
}

/// Fraction of the combined list `a ++ b` whose best similarity to the
/// other list reaches `threshold`; `None` if either list is empty.
pub fn inter_annotator_agreement(
    a: &[String],
    b: &[String],
    embeddings: &EmbeddingTable<f64>,
    threshold: f64,
) -> Result<Option<f64>, SkillspaceError> {
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut matched = 0;
    for (side, other) in [(a, b), (b, a)] {
        for s in side {
            if embeddings.max_similarity(s, other)?.is_some_and(|m| m >= threshold) {
                matched += 1;
            }
        }
    }
    Ok(Some(matched as f64 / (a.len() + b.len()) as f64))
}
