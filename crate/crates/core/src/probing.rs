//! Self-consistency probing of individual skills.
//!
//! Claims localized in rationale steps are turned into three probing
//! questions (restated yes/no, contradictory yes/no, open-ended), each
//! answered several times at non-zero temperature. A claim whose answers
//! contradict each other counts as inconsistent.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{Rationale, RationaleStep};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::{skill_key, EvaluationInstance};
use crate::prompts::PromptSet;
use crate::skillspace::SkillCluster;
use crate::slicing::SliceAccuracyTable;
use crate::stats;
use crate::ClusterId;

pub const PROBE_SETS_FILE: &str = "probe_sets.jsonl";
pub const PROBE_RESULTS_FILE: &str = "probe_results.jsonl";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("need {need} slices with accuracies for every model, have {have}")]
    InsufficientSlices { need: usize, have: usize },
    #[error("skill {cluster_id} has no rationale steps to probe")]
    NoExcerpts { cluster_id: ClusterId },
    #[error("skill {cluster_id}: only {got} valid claims, need {min}")]
    TooFewClaims { cluster_id: ClusterId, got: usize, min: usize },
    #[error("no probe results for skill {cluster_id} ({model})")]
    MissingResults { cluster_id: ClusterId, model: String },
    #[error("claim has no answers for {0}")]
    NoAnswers(&'static str),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeGroups {
    /// Ascending accuracy within each group.
    pub lowest: Vec<ClusterId>,
    pub median: Vec<ClusterId>,
    pub highest: Vec<ClusterId>,
}

impl ProbeGroups {
    pub fn all(&self) -> Vec<ClusterId> {
        self.lowest.iter().chain(&self.median).chain(&self.highest).copied().collect()
    }
}

/// Slices ranked by accuracy averaged over `models` (ascending, ties by
/// cluster id). Only slices every model has a cell for are ranked.
pub fn rank_slices(table: &SliceAccuracyTable, models: &[String]) -> Vec<(ClusterId, f64)> {
    let mut ranked: Vec<(ClusterId, f64)> = table
        .slices
        .iter()
        .filter_map(|s| Some((s.cluster_id, table.mean_accuracy(models, s.cluster_id)?)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Bottom `n`, top `n`, and `n` around the median rank. With `N` ranked
/// slices and `m = (N - 1) / 2` (floor), the median group starts at rank
/// `m - n / 2`, shifted as needed to stay clear of the other two groups.
pub fn select_probe_skills(table: &SliceAccuracyTable, models: &[String], n: usize) -> Result<ProbeGroups, ProbeError> {
    let ranked = rank_slices(table, models);
    let total = ranked.len();
    if n == 0 || total < 3 * n {
        return Err(ProbeError::InsufficientSlices { need: 3 * n.max(1), have: total });
    }
    let m = (total - 1) / 2;
    let start = m.saturating_sub(n / 2).clamp(n, total - 2 * n);
    let ids = |r: std::ops::Range<usize>| ranked[r].iter().map(|x| x.0).collect();
    Ok(ProbeGroups {
        lowest: ids(0..n),
        median: ids(start..start + n),
        highest: ids(total - n..total),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeClaim {
    pub claim: String,
    pub q1: String,
    pub q2: String,
    pub q3: String,
    pub source_instance_id: String,
    pub source_step: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub skill_cluster_id: ClusterId,
    pub skill_name: String,
    pub claims: Vec<ProbeClaim>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Excerpt<'a> {
    pub instance_id: &'a str,
    pub step: &'a RationaleStep,
}

/// Rationale steps whose skill names fall in `cluster`, by instance id then
/// step index.
pub fn excerpts_for<'a>(cluster: &SkillCluster, rationales: &'a [Rationale]) -> Vec<Excerpt<'a>> {
    let keys: BTreeSet<String> = cluster.members.iter().map(|m| skill_key(m)).collect();
    let mut out: Vec<Excerpt<'a>> = rationales
        .iter()
        .flat_map(|r| {
            r.steps.iter().map(move |s| Excerpt {
                instance_id: &r.instance_id,
                step: s,
            })
        })
        .filter(|e| e.step.skill.names.iter().any(|n| keys.contains(&skill_key(n))))
        .collect();
    out.sort_by(|a, b| a.instance_id.cmp(b.instance_id).then(a.step.index.cmp(&b.step.index)));
    out
}

pub fn build_generation_prompt(skill: &str, step: &RationaleStep, prompts: &PromptSet, model: &str) -> ChatRequest {
    let user = format!(
        "*SKILL TO PINPOINT*: **{skill}**\n\n*EXCERPT*:\n{}\n*CLAIM AND PROBE QUESTIONS*:",
        step.to_canonical_text()
    );
    ChatRequest::new(model, prompts.probe_generation.clone(), user)
}

static FENCED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z]*\s*\n?(.*?)```").unwrap());
static BRACED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)\{.*\}").unwrap());

fn field(body: &str, key: &str) -> Option<String> {
    for quote in ['"', '\''] {
        let pat = format!(
            r#"(?s)['"]{key}['"]\s*:\s*{q}((?:[^{q}\\]|\\.)*){q}"#,
            q = regex::escape(&quote.to_string())
        );
        if let Some(c) = Regex::new(&pat).unwrap().captures(body) {
            let v = c[1].replace(&format!("\\{quote}"), &quote.to_string()).replace("\\n", "\n");
            let v = v.trim().to_string();
            if !v.is_empty() {
                return Some(v);
            }
        }
    }
    None
}

/// `(claim, q1, q2, q3)` from a dictionary reply, preferring a fenced
/// block. Accepts JSON and Python-style single-quoted literals.
pub fn parse_probe_dict(raw: &str) -> Option<(String, String, String, String)> {
    let body = FENCED
        .captures(raw)
        .map(|c| c.get(1).unwrap().as_str())
        .or_else(|| BRACED.find(raw).map(|m| m.as_str()))?;
    if let Ok(map) = serde_json::from_str::<BTreeMap<String, serde_json::Value>>(body.trim()) {
        let get = |k: &str| map.get(k).and_then(|v| v.as_str()).map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        if let (Some(c), Some(a), Some(b), Some(d)) = (get("CLAIM"), get("Q1"), get("Q2"), get("Q3")) {
            return Some((c, a, b, d));
        }
    }
    Some((field(body, "CLAIM")?, field(body, "Q1")?, field(body, "Q2")?, field(body, "Q3")?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeLimits {
    pub max_claims: usize,
    pub min_claims: usize,
}

impl Default for ProbeLimits {
    fn default() -> Self {
        Self {
            max_claims: 20,
            min_claims: 5,
        }
    }
}

/// Asks for one claim per excerpt, in excerpt order, until `max_claims`
/// valid claims exist or the excerpts run out. Requests go out in batches
/// sized to the number of claims still missing.
pub fn generate_probe_set(
    cluster_id: ClusterId,
    skill_name: &str,
    excerpts: &[Excerpt<'_>],
    gateway: &Gateway,
    prompts: &PromptSet,
    model: &str,
    limits: ProbeLimits,
) -> Result<ProbeSet, ProbeError> {
    if excerpts.is_empty() {
        return Err(ProbeError::NoExcerpts { cluster_id });
    }
    let mut claims = Vec::new();
    let mut next = 0;
    while claims.len() < limits.max_claims && next < excerpts.len() {
        let want = (limits.max_claims - claims.len()).min(excerpts.len() - next);
        let batch = &excerpts[next..next + want];
        next += want;
        let reqs: Vec<ChatRequest> = batch
            .iter()
            .map(|e| build_generation_prompt(skill_name, e.step, prompts, model))
            .collect();
        for (e, res) in batch.iter().zip(gateway.complete_all(&reqs)) {
            let parsed = match res {
                Ok(mut r) => parse_probe_dict(&r.remove(0)),
                Err(err @ GatewayError::FixtureMiss { .. }) => return Err(err.into()),
                Err(err) => {
                    log::warn!("probe generation for {} step {} failed: {err}", e.instance_id, e.step.index);
                    None
                }
            };
            match parsed {
                Some((claim, q1, q2, q3)) => claims.push(ProbeClaim {
                    claim,
                    q1,
                    q2,
                    q3,
                    source_instance_id: e.instance_id.to_string(),
                    source_step: e.step.index,
                }),
                None => log::info!("skipping malformed probe reply for {} step {}", e.instance_id, e.step.index),
            }
        }
    }
    if claims.len() < limits.min_claims {
        return Err(ProbeError::TooFewClaims {
            cluster_id,
            got: claims.len(),
            min: limits.min_claims,
        });
    }
    Ok(ProbeSet {
        skill_cluster_id: cluster_id,
        skill_name: skill_name.to_string(),
        claims,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub samples: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            samples: 5,
        }
    }
}

/// A probing question about `instance`'s content; the original question
/// is given as context and its image forwarded.
pub fn build_probe_answer_prompt(
    question: &str,
    instance: &EvaluationInstance,
    prompts: &PromptSet,
    model: &str,
    sampling: SamplingParams,
) -> ChatRequest {
    let user = format!("Context: {}\n\nQuestion: {question}", instance.render_question());
    ChatRequest::new(model, prompts.probe_answer.clone(), user)
        .with_image(instance.image_ref.clone())
        .with_temperature(sampling.temperature)
        .with_samples(sampling.samples)
}

pub fn build_judge_prompt(question: &str, answers: &[String], prompts: &PromptSet, model: &str) -> ChatRequest {
    let mut user = format!("Question: {question}\n\nAnswers:\n");
    for (i, a) in answers.iter().enumerate() {
        user.push_str(&format!("{}. {}\n", i + 1, a.trim().replace('\n', " ")));
    }
    ChatRequest::new(model, prompts.consistency_judge.clone(), user.trim_end())
}

/// `true` when the judge calls the answers inconsistent. Replies naming
/// neither verdict count as inconsistent.
pub fn parse_judge_reply(raw: &str) -> bool {
    let up = raw.to_uppercase();
    up.contains("INCONSISTENT") || !up.contains("CONSISTENT")
}

/// First token as yes/no; anything else is `None`.
pub fn normalize_yes_no(answer: &str) -> Option<bool> {
    let token: String = answer
        .trim_start()
        .chars()
        .skip_while(|c| !c.is_alphanumeric())
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" | "y" | "true" => Some(true),
        "no" | "n" | "false" => Some(false),
        _ => None,
    }
}

/// Which rules can mark a claim inconsistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyRules {
    pub q1_unanimous: bool,
    pub q2_unanimous: bool,
    pub q1_q2_opposed: bool,
    pub q3_judge: bool,
}

impl Default for ConsistencyRules {
    fn default() -> Self {
        Self {
            q1_unanimous: true,
            q2_unanimous: true,
            q1_q2_opposed: true,
            q3_judge: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InconsistencyReason {
    Q1Disagreement,
    Q2Disagreement,
    NoContradiction,
    Q3Judge,
}

/// The unanimous yes/no value, or `None` if any answer is unparseable or
/// they disagree.
fn unanimous(answers: &[String]) -> Option<bool> {
    let parsed: Option<Vec<bool>> = answers.iter().map(|a| normalize_yes_no(a)).collect();
    let parsed = parsed?;
    let first = *parsed.first()?;
    parsed.iter().all(|&v| v == first).then_some(first)
}

fn majority(answers: &[String]) -> Option<bool> {
    let parsed: Vec<bool> = answers.iter().filter_map(|a| normalize_yes_no(a)).collect();
    let yes = parsed.iter().filter(|&&v| v).count();
    let no = parsed.len() - yes;
    (yes != no).then_some(yes > no)
}

/// Applies the local rules in order, consulting `judge_q3` (which returns
/// `true` for "inconsistent") only if they all pass. `None` means
/// consistent.
pub fn judge_claim_consistency(
    q1: &[String],
    q2: &[String],
    q3: &[String],
    rules: ConsistencyRules,
    judge_q3: impl FnOnce(&[String]) -> Result<bool, GatewayError>,
) -> Result<Option<InconsistencyReason>, ProbeError> {
    for (name, a) in [("q1", q1), ("q2", q2), ("q3", q3)] {
        if a.is_empty() {
            return Err(ProbeError::NoAnswers(name));
        }
    }
    let u1 = unanimous(q1);
    let u2 = unanimous(q2);
    if rules.q1_unanimous && u1.is_none() {
        return Ok(Some(InconsistencyReason::Q1Disagreement));
    }
    if rules.q2_unanimous && u2.is_none() {
        return Ok(Some(InconsistencyReason::Q2Disagreement));
    }
    if rules.q1_q2_opposed {
        match (u1.or_else(|| majority(q1)), u2.or_else(|| majority(q2))) {
            (Some(a), Some(b)) if a != b => {}
            _ => return Ok(Some(InconsistencyReason::NoContradiction)),
        }
    }
    if rules.q3_judge && judge_q3(q3)? {
        return Ok(Some(InconsistencyReason::Q3Judge));
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub q1_answers: Vec<String>,
    pub q2_answers: Vec<String>,
    pub q3_answers: Vec<String>,
    pub inconsistent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<InconsistencyReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub skill_cluster_id: ClusterId,
    pub model: String,
    pub claims: Vec<ClaimResult>,
    pub inconsistency_rate: f64,
}

/// Fraction of inconsistent claims; `None` for no claims.
pub fn inconsistency_rate(claims: &[ClaimResult]) -> Option<f64> {
    (!claims.is_empty()).then(|| claims.iter().filter(|c| c.inconsistent).count() as f64 / claims.len() as f64)
}

#[derive(Clone, Copy)]
pub struct ProbeRun<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub judge_model: &'a str,
    pub sampling: SamplingParams,
    pub rules: ConsistencyRules,
}

/// Collects all probe answers for `model` (in parallel under the gateway
/// bound), then judges claims one after another in claim order.
pub fn run_probe_set(
    set: &ProbeSet,
    model: &str,
    instance: impl Fn(&str) -> Option<EvaluationInstance>,
    run: ProbeRun<'_>,
) -> Result<ProbeResult, ProbeError> {
    let mut reqs = Vec::with_capacity(set.claims.len() * 3);
    for c in &set.claims {
        let inst = instance(&c.source_instance_id)
            .unwrap_or_else(|| EvaluationInstance::text("probe", &c.source_instance_id, c.claim.clone(), ""));
        for q in [&c.q1, &c.q2, &c.q3] {
            reqs.push(build_probe_answer_prompt(q, &inst, run.prompts, model, run.sampling));
        }
    }
    let mut answers = run.gateway.complete_all(&reqs).into_iter();
    let mut claims = Vec::with_capacity(set.claims.len());
    for c in &set.claims {
        let q1 = answers.next().unwrap()?;
        let q2 = answers.next().unwrap()?;
        let q3 = answers.next().unwrap()?;
        let reason = judge_claim_consistency(&q1, &q2, &q3, run.rules, |a| {
            let req = build_judge_prompt(&c.q3, a, run.prompts, run.judge_model);
            Ok(parse_judge_reply(&run.gateway.complete_chat(&req)?.remove(0)))
        })?;
        claims.push(ClaimResult {
            q1_answers: q1,
            q2_answers: q2,
            q3_answers: q3,
            inconsistent: reason.is_some(),
            reason,
        });
    }
    Ok(ProbeResult {
        skill_cluster_id: set.skill_cluster_id,
        model: model.to_string(),
        inconsistency_rate: inconsistency_rate(&claims).unwrap_or(0.0),
        claims,
    })
}

/// Pearson r over `(inconsistency rate, slice accuracy)` points.
pub fn correlate_inconsistency(points: &[(f64, f64)]) -> Option<f64> {
    let (r, a): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    stats::pearson(&r, &a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deficiency {
    pub cluster_id: ClusterId,
    pub name: String,
    pub accuracy: f64,
    pub inconsistency_rate: f64,
}

/// Slices where `model` is at most `acc_threshold` accurate, kept when its
/// inconsistency rate is at least `inconsistency_threshold`. Most
/// inconsistent first.
pub fn diagnose_deficiencies(
    table: &SliceAccuracyTable,
    model: &str,
    rates: &BTreeMap<ClusterId, f64>,
    acc_threshold: f64,
    inconsistency_threshold: f64,
) -> Result<Vec<Deficiency>, ProbeError> {
    let mut out = Vec::new();
    for s in &table.slices {
        let Some(acc) = table.accuracy(model, s.cluster_id) else { continue };
        if acc > acc_threshold {
            continue;
        }
        let rate = *rates.get(&s.cluster_id).ok_or_else(|| ProbeError::MissingResults {
            cluster_id: s.cluster_id,
            model: model.to_string(),
        })?;
        if rate >= inconsistency_threshold {
            out.push(Deficiency {
                cluster_id: s.cluster_id,
                name: s.name.clone(),
                accuracy: acc,
                inconsistency_rate: rate,
            });
        }
    }
    out.sort_by(|a, b| b.inconsistency_rate.total_cmp(&a.inconsistency_rate).then(a.cluster_id.cmp(&b.cluster_id)));
    Ok(out)
}
