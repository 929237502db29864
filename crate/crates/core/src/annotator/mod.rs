//! Skill annotation by rationale parsing, plus the direct-listing
//! alternative used for comparison.

mod parse;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use parse::{
    parse_rationale, parse_skill_list, split_skill_line, ParseError, ParseWarning, Rationale,
    RationaleStep,
};

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::{Corpus, EvaluationInstance, SkillMention};
use crate::prompts::PromptSet;

pub const RATIONALES_FILE: &str = "rationales.jsonl";

fn user_prompt(instance: &EvaluationInstance) -> String {
    format!("Question: {}", instance.render_question())
}

/// The rationale request for `instance`: guidelines plus in-context example
/// as the system prompt, the question (and choices) as the user turn.
/// Temperature 0.
pub fn build_rationale_prompt(instance: &EvaluationInstance, prompts: &PromptSet, model: &str) -> ChatRequest {
    ChatRequest::new(model, prompts.rationale.clone(), user_prompt(instance))
        .with_image(instance.image_ref.clone())
}

pub fn build_direct_prompt(instance: &EvaluationInstance, prompts: &PromptSet, model: &str) -> ChatRequest {
    ChatRequest::new(model, prompts.direct_skills.clone(), user_prompt(instance))
        .with_image(instance.image_ref.clone())
}

/// One mention per rationale step.
pub fn mentions_from_rationale(r: &Rationale) -> Vec<SkillMention> {
    r.steps.iter().map(|s| s.skill.clone()).collect()
}

/// Skills from asking the model to list them directly. May be empty when
/// the model answers the question instead.
pub fn direct_prompt_skills(
    instance: &EvaluationInstance,
    gateway: &Gateway,
    prompts: &PromptSet,
    model: &str,
) -> Result<Vec<SkillMention>, GatewayError> {
    let raw = gateway
        .complete_chat(&build_direct_prompt(instance, prompts, model))?
        .remove(0);
    Ok(parse_skill_list(&raw, &instance.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct AnnotationOutcome {
    /// Every successful rationale (earlier and new), sorted by instance id.
    pub rationales: Vec<Rationale>,
    pub failures: Vec<AnnotationFailure>,
    /// Instances skipped because an earlier run already annotated them.
    pub resumed: usize,
}

/// Annotates every instance lacking a rationale in `prior`, in batches of
/// `batch_size`, calling `checkpoint` with all rationales so far after each
/// batch. Per-instance failures are collected; the run continues. The
/// corpus annotations are replaced by the mentions of the returned
/// rationales.
pub fn annotate_corpus(
    corpus: &mut Corpus,
    gateway: &Gateway,
    prompts: &PromptSet,
    model: &str,
    prior: Vec<Rationale>,
    batch_size: usize,
    mut checkpoint: impl FnMut(&[Rationale]),
) -> AnnotationOutcome {
    let mut done: BTreeMap<String, Rationale> = prior
        .into_iter()
        .filter(|r| corpus.contains(&r.instance_id) && r.annotator_model == model)
        .map(|r| (r.instance_id.clone(), r))
        .collect();
    let resumed = done.len();
    let todo: Vec<&EvaluationInstance> = corpus
        .instances()
        .iter()
        .filter(|i| !done.contains_key(&i.id))
        .collect();

    let mut failures = Vec::new();
    for chunk in todo.chunks(batch_size.max(1)) {
        let reqs: Vec<ChatRequest> = chunk
            .iter()
            .map(|i| build_rationale_prompt(i, prompts, model))
            .collect();
        for (inst, result) in chunk.iter().zip(gateway.complete_all(&reqs)) {
            let parsed = result
                .map_err(|e| e.to_string())
                .and_then(|mut raw| parse_rationale(&raw.remove(0), &inst.id, model).map_err(|e| e.to_string()));
            match parsed {
                Ok(r) => {
                    done.insert(inst.id.clone(), r);
                }
                Err(error) => {
                    log::warn!("annotation of {} failed: {error}", inst.id);
                    failures.push(AnnotationFailure {
                        instance_id: inst.id.clone(),
                        error,
                    });
                }
            }
        }
        let so_far: Vec<Rationale> = done.values().cloned().collect();
        checkpoint(&so_far);
    }

    let rationales: Vec<Rationale> = done.into_values().collect();
    corpus.annotations.clear();
    for r in &rationales {
        corpus
            .set_annotations(&r.instance_id, mentions_from_rationale(r))
            .expect("rationales were filtered to corpus instances");
    }
    AnnotationOutcome {
        rationales,
        failures,
        resumed,
    }
}

/// Mean number of distinct skills per annotated instance.
pub fn mean_skills_per_instance(corpus: &Corpus) -> Option<f64> {
    let counts: Vec<usize> = corpus
        .annotations
        .keys()
        .map(|id| corpus.instance_skills(id).len())
        .collect();
    (!counts.is_empty()).then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Fraction of steps whose skill carries at least `min_names` names.
pub fn cascade_fraction(rationales: &[Rationale], min_names: usize) -> Option<f64> {
    let steps: Vec<&RationaleStep> = rationales.iter().flat_map(|r| &r.steps).collect();
    (!steps.is_empty()).then(|| {
        steps.iter().filter(|s| s.skill.names.len() >= min_names).count() as f64 / steps.len() as f64
    })
}

/// Distinct skill keys per instance; useful for overlap statistics.
pub fn skill_sets(corpus: &Corpus) -> BTreeMap<String, BTreeSet<String>> {
    corpus
        .annotations
        .keys()
        .map(|id| {
            (
                id.clone(),
                corpus
                    .instance_skills(id)
                    .iter()
                    .map(|s| crate::model::skill_key(s))
                    .collect(),
            )
        })
        .collect()
}
