//! A rule-based chat backend for offline runs.
//!
//! Every reply is a pure function of the request and a script that lists,
//! per instance, the skills a solver applies and, per model, how reliable it
//! is on each topic. Requests are recognised by their system prompt, so the
//! backend must be built with the same [`PromptSet`] the pipeline uses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skillslice::gateway::{ChatBackend, ChatRequest, GatewayError};
use skillslice::model::{skill_key, EvaluationInstance};
use skillslice::prompts::PromptSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSkill {
    pub category: String,
    /// Coarse to fine; the first name is the topic proficiencies key on.
    pub names: Vec<String>,
    pub claim: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedInstance {
    pub instance: EvaluationInstance,
    pub skills: Vec<ScriptedSkill>,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    /// Topic -> probability of handling it correctly.
    #[serde(default)]
    pub proficiency: BTreeMap<String, f64>,
    #[serde(default = "half")]
    pub default_proficiency: f64,
    /// Chance that a verifier flips a relevance verdict.
    #[serde(default)]
    pub verifier_noise: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub instances: Vec<ScriptedInstance>,
    pub models: BTreeMap<String, ModelProfile>,
}

impl Script {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Answer,
    Rationale,
    DirectSkills,
    Verify,
    ProbeGeneration,
    ProbeAnswer,
    Judge,
    Attributes,
}

pub struct SimulatedBackend {
    script: Script,
    kinds: HashMap<String, Kind>,
    /// (rendered question, index into script.instances), longest first.
    questions: Vec<(String, usize)>,
    /// Skill key of any name -> topic key.
    topics: HashMap<String, String>,
}

static STEP_SKILL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\*SKILL TO PINPOINT\*:\s*\*\*(.+?)\*\*").unwrap());
static CONCLUSION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\s*-?\s*\**Conclusion:\**\s*(.+)$").unwrap());
static ABOUT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^Question: About (.+?): ").unwrap());
static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^(\d+)\. (.+)$").unwrap());

/// Uniform in [0, 1) from the hashed parts.
fn unit(parts: &[&str]) -> f64 {
    let h = Sha256::digest(parts.join("\u{1f}").as_bytes());
    let x = u64::from_le_bytes(h[..8].try_into().unwrap());
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

impl SimulatedBackend {
    pub fn new(script: Script, prompts: &PromptSet) -> Self {
        let kinds = [
            (&prompts.answer, Kind::Answer),
            (&prompts.rationale, Kind::Rationale),
            (&prompts.direct_skills, Kind::DirectSkills),
            (&prompts.verify, Kind::Verify),
            (&prompts.probe_generation, Kind::ProbeGeneration),
            (&prompts.probe_answer, Kind::ProbeAnswer),
            (&prompts.consistency_judge, Kind::Judge),
            (&prompts.attributes, Kind::Attributes),
        ]
        .into_iter()
        .map(|(p, k)| (p.clone(), k))
        .collect();
        let mut questions: Vec<(String, usize)> = script
            .instances
            .iter()
            .enumerate()
            .map(|(i, s)| (s.instance.render_question(), i))
            .collect();
        questions.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let mut topics = HashMap::new();
        for s in script.instances.iter().flat_map(|i| &i.skills) {
            let topic = skill_key(&s.names[0]);
            for n in &s.names {
                topics.entry(skill_key(n)).or_insert_with(|| topic.clone());
            }
        }
        Self {
            script,
            kinds,
            questions,
            topics,
        }
    }

    fn instance_for(&self, user: &str) -> Result<&ScriptedInstance, GatewayError> {
        self.questions
            .iter()
            .find(|(q, _)| user.contains(q.as_str()))
            .map(|(_, i)| &self.script.instances[*i])
            .ok_or_else(|| GatewayError::Malformed("simulated backend: no scripted instance matches the prompt".into()))
    }

    fn proficiency(&self, model: &str, topic: &str) -> f64 {
        match self.script.models.get(model) {
            Some(p) => p.proficiency.get(topic).copied().unwrap_or(p.default_proficiency),
            None => 0.5,
        }
    }

    fn instance_proficiency(&self, model: &str, s: &ScriptedInstance) -> f64 {
        let ps: Vec<f64> = s.skills.iter().map(|k| self.proficiency(model, &skill_key(&k.names[0]))).collect();
        if ps.is_empty() {
            return self.proficiency(model, "");
        }
        ps.iter().sum::<f64>() / ps.len() as f64
    }

    fn answer(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let s = self.instance_for(&req.user_prompt)?;
        let inst = &s.instance;
        let right = unit(&[&req.model, &inst.id, "answer"]) < self.instance_proficiency(&req.model, s);
        if right {
            return Ok(format!("ANSWER: {}", inst.gold_answer));
        }
        Ok(match &inst.choices {
            Some(c) if c.len() > 1 => {
                let at = c.iter().position(|x| x.label == inst.gold_answer).unwrap_or(0);
                format!("ANSWER: {}", c[(at + 1) % c.len()].label)
            }
            _ => "ANSWER: unsure".to_string(),
        })
    }

    fn rationale(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let s = self.instance_for(&req.user_prompt)?;
        let mut out = String::new();
        for (i, k) in s.skills.iter().enumerate() {
            let n = i + 1;
            out.push_str(&format!(
                "{n}. **Step {n}: Apply {}**\n   - **Skill:** {}: {}\n   - **Evidence:** The question calls for {}.\n   - **Conclusion:** {}\n\n",
                lower_first(&k.names[0]),
                k.category,
                k.names.join(", "),
                lower_first(k.names.last().unwrap()),
                k.claim
            ));
        }
        out.push_str(&format!("   **ANSWER: {}**\n", s.instance.gold_answer));
        Ok(out)
    }

    fn direct(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let s = self.instance_for(&req.user_prompt)?;
        let names: Vec<String> = s.skills.iter().flat_map(|k| k.names.iter().map(|n| format!("- {n}"))).collect();
        Ok(names.join("\n"))
    }

    fn verify(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let s = self.instance_for(&req.user_prompt)?;
        let own: BTreeSet<String> = s.skills.iter().flat_map(|k| k.names.iter().map(|n| skill_key(n))).collect();
        let noise = self.script.models.get(&req.model).map_or(0.0, |p| p.verifier_noise);
        let list = req.user_prompt.split("\n\nSkills:\n").nth(1).unwrap_or("");
        let lines: Vec<String> = NUMBERED
            .captures_iter(list)
            .map(|c| {
                let skill = c[2].trim();
                let mut relevant = own.contains(&skill_key(skill));
                if unit(&[&req.model, &s.instance.id, skill, "verify"]) < noise {
                    relevant = !relevant;
                }
                format!("{}. {}", &c[1], if relevant { "RELEVANT" } else { "IRRELEVANT" })
            })
            .collect();
        Ok(lines.join("\n"))
    }

    fn probe_generation(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let bad = || GatewayError::Malformed("simulated backend: unexpected probe-generation prompt".into());
        let skill = STEP_SKILL.captures(&req.user_prompt).ok_or_else(bad)?[1].trim().to_string();
        let claim = CONCLUSION.captures(&req.user_prompt).ok_or_else(bad)?[1].trim().to_string();
        let plain = lower_first(claim.trim_end_matches('.'));
        let dict = serde_json::json!({
            "CLAIM": claim,
            "Q1": format!("About {skill}: is it true that {plain}?"),
            "Q2": format!("About {skill}: is it true that the reverse holds, that {plain} is wrong?"),
            "Q3": format!("About {skill}: what does this step establish?"),
        });
        Ok(format!("```\n{}\n```", serde_json::to_string_pretty(&dict).unwrap()))
    }

    fn probe_answer(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let s = self.instance_for(&req.user_prompt)?;
        let skill = ABOUT
            .captures(&req.user_prompt)
            .map(|c| c[1].trim().to_string())
            .ok_or_else(|| GatewayError::Malformed("simulated backend: unexpected probe question".into()))?;
        let topic = self.topics.get(&skill_key(&skill)).cloned().unwrap_or_else(|| skill_key(&skill));
        let consistent = unit(&[&req.model, &s.instance.id, &skill, "probe"]) < self.proficiency(&req.model, &topic);
        let q = req.user_prompt.rsplit("Question: ").next().unwrap_or("");
        let n = req.n_samples as usize;
        let out = (0..n)
            .map(|i| {
                let flip = !consistent && i % 2 == 1;
                if q.contains("the reverse holds") {
                    if flip { "Yes." } else { "No." }.to_string()
                } else if q.contains("what does this step establish") {
                    if consistent {
                        format!("It establishes a fact about {}.", lower_first(&skill))
                    } else {
                        format!("Possibly outcome number {}.", i + 1)
                    }
                } else {
                    if flip { "No." } else { "Yes." }.to_string()
                }
            })
            .collect();
        Ok(out)
    }

    fn judge(&self, req: &ChatRequest) -> String {
        let answers: BTreeSet<String> = NUMBERED
            .captures_iter(req.user_prompt.split("Answers:\n").nth(1).unwrap_or(""))
            .map(|c| c[2].trim().to_lowercase())
            .collect();
        if answers.len() <= 1 { "CONSISTENT" } else { "INCONSISTENT" }.to_string()
    }

    fn attributes(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let s = self.instance_for(&req.user_prompt)?;
        Ok(s.attributes.iter().map(|a| format!("- {a}")).collect::<Vec<_>>().join("\n"))
    }
}

impl ChatBackend for SimulatedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let kind = *self
            .kinds
            .get(&req.system_prompt)
            .ok_or_else(|| GatewayError::Malformed("simulated backend: unrecognised system prompt".into()))?;
        let n = req.n_samples as usize;
        let one = |r: Result<String, GatewayError>| r.map(|s| vec![s; n]);
        match kind {
            Kind::Answer => one(self.answer(req)),
            Kind::Rationale => one(self.rationale(req)),
            Kind::DirectSkills => one(self.direct(req)),
            Kind::Verify => one(self.verify(req)),
            Kind::ProbeGeneration => one(self.probe_generation(req)),
            Kind::ProbeAnswer => self.probe_answer(req),
            Kind::Judge => one(Ok(self.judge(req))),
            Kind::Attributes => one(self.attributes(req)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use skillslice::annotator::{build_rationale_prompt, parse_rationale};

    fn script() -> Script {
        let inst = EvaluationInstance::text("toy", "1", "What is 2 + 3?", "5");
        Script {
            instances: vec![ScriptedInstance {
                instance: inst,
                skills: vec![ScriptedSkill {
                    category: "Reasoning".into(),
                    names: vec!["Arithmetic".into(), "Addition".into(), "Adding small integers".into()],
                    claim: "Two plus three equals five.".into(),
                }],
                attributes: vec!["small numbers".into()],
            }],
            models: BTreeMap::from([(
                "good".to_string(),
                ModelProfile {
                    proficiency: BTreeMap::from([("arithmetic".to_string(), 1.0)]),
                    default_proficiency: 0.0,
                    verifier_noise: 0.0,
                },
            )]),
        }
    }

    #[test]
    fn rationale_round_trips_through_the_parser() {
        let p = PromptSet::default();
        let b = SimulatedBackend::new(script(), &p);
        let inst = &b.script.instances[0].instance.clone();
        let raw = b.complete(&build_rationale_prompt(inst, &p, "a")).unwrap().remove(0);
        let r = parse_rationale(&raw, &inst.id, "a").unwrap();
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.steps[0].skill.names, ["Arithmetic", "Addition", "Adding small integers"]);
        assert_eq!(r.final_answer, "5");
    }

    #[test]
    fn proficient_model_answers_correctly_and_unknown_prompt_fails() {
        let p = PromptSet::default();
        let b = SimulatedBackend::new(script(), &p);
        let inst = &b.script.instances[0].instance;
        let req = ChatRequest::new("good", p.answer.clone(), inst.render_question());
        assert_eq!(b.complete(&req).unwrap(), ["ANSWER: 5"]);
        let req = ChatRequest::new("good", "something else", inst.render_question());
        assert!(b.complete(&req).is_err());
    }
}
