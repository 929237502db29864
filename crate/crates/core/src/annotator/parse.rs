//! Line-oriented, tolerant parser for step-by-step rationales.
//!
//! Markdown decoration (bullets, numbering, bold/italic markers, headings)
//! is stripped before matching. Unrecognised lines inside a step extend the
//! field that precedes them.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SkillMention;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no parsable steps in rationale for {instance_id}")]
    NoSteps { instance_id: String, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    MissingAnswer,
    MissingConclusion { step: u32 },
    /// A step header without a usable skill line was dropped.
    StepWithoutSkill { header: u32 },
    /// Header numbering disagreed with the position of the step.
    Renumbered { header: u32, index: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleStep {
    pub index: u32,
    pub title: String,
    pub skill: SkillMention,
    pub evidence: String,
    /// The localized claim this step arrives at.
    pub conclusion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub instance_id: String,
    pub annotator_model: String,
    pub raw_text: String,
    pub steps: Vec<RationaleStep>,
    pub final_answer: String,
    #[serde(default)]
    pub parse_warnings: Vec<ParseWarning>,
}

impl Rationale {
    /// Canonical plain-text rendering; parsing it yields the same steps and
    /// final answer.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&step.to_canonical_text());
            out.push('\n');
        }
        out.push_str(&format!("ANSWER: {}\n", self.final_answer));
        out
    }
}

impl RationaleStep {
    pub fn to_canonical_text(&self) -> String {
        let names = self.skill.names.join(", ");
        let skill = if self.skill.category.is_empty() {
            names
        } else {
            format!("{}: {}", self.skill.category, names)
        };
        format!(
            "Step {}: {}\n- Skill: {}\n- Evidence: {}\n- Conclusion: {}\n",
            self.index, self.title, skill, self.evidence, self.conclusion
        )
    }
}

fn re(cell: &'static OnceLock<Regex>, pat: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).unwrap())
}

fn step_header(line: &str) -> Option<(u32, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let c = re(&RE, r"(?i)^step\s*(\d+)\s*(?:[:.)\-–—]\s*(.*))?$").captures(line)?;
    let n = c[1].parse().ok()?;
    Some((n, c.get(2).map_or("", |m| m.as_str()).trim().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Field {
    Title,
    Skill,
    Evidence,
    Conclusion,
}

fn field(line: &str) -> Option<(Field, String)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let c = re(&RE, r"(?i)^(skills?|evidence|conclusion)\s*:\s*(.*)$").captures(line)?;
    let f = match c[1].to_lowercase().as_str() {
        "evidence" => Field::Evidence,
        "conclusion" => Field::Conclusion,
        _ => Field::Skill,
    };
    Some((f, c[2].trim().to_string()))
}

fn answer_line(line: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?i)^(?:final\s+)?answer\s*:\s*(.*)$")
        .captures(line)
        .map(|c| c[1].trim().to_string())
}

/// Strips list markers, headings and emphasis so only content remains.
pub(crate) fn clean_line(line: &str) -> String {
    static LEAD: OnceLock<Regex> = OnceLock::new();
    let no_emphasis = line.replace("**", "").replace("__", "");
    let lead = re(&LEAD, r"^(?:\s*(?:#{1,6}\s+|[-*•+]\s+|\d{1,3}[.)]\s+))*");
    let stripped = lead.replace(no_emphasis.trim(), "");
    stripped
        .trim()
        .trim_start_matches(['*', '_'])
        .replace(":*", ":")
        .replace(":_", ":")
        .trim()
        .to_string()
}

/// Splits `Category: name, name, name` into the category and names.
pub fn split_skill_line(value: &str) -> (String, Vec<String>) {
    let (category, rest) = match value.split_once(':') {
        Some((c, r)) => (c.trim().to_string(), r),
        None => (String::new(), value),
    };
    let names = rest
        .split([',', ';'])
        .map(|n| n.trim().trim_end_matches('.').trim().to_string())
        .filter(|n| !n.is_empty())
        .collect();
    (category, names)
}

#[derive(Default)]
struct Draft {
    header: u32,
    title: String,
    skill: String,
    evidence: Vec<String>,
    conclusion: Vec<String>,
}

impl Draft {
    fn push(&mut self, f: Field, text: String) {
        match f {
            Field::Title => {
                if !text.is_empty() {
                    if !self.title.is_empty() {
                        self.title.push(' ');
                    }
                    self.title.push_str(&text);
                }
            }
            Field::Skill => {
                if !text.is_empty() {
                    if !self.skill.is_empty() {
                        self.skill.push(' ');
                    }
                    self.skill.push_str(&text);
                }
            }
            Field::Evidence => self.evidence.push(text),
            Field::Conclusion => self.conclusion.push(text),
        }
    }
}

fn join_lines(lines: &[String]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses a raw rationale into steps, skills and the final answer.
pub fn parse_rationale(raw: &str, instance_id: &str, model: &str) -> Result<Rationale, ParseError> {
    let mut drafts: Vec<Draft> = Vec::new();
    let mut current: Option<(Draft, Field)> = None;
    let mut final_answer: Option<String> = None;

    for line in raw.lines() {
        let line = clean_line(line);
        if line.is_empty() {
            continue;
        }
        if let Some((n, title)) = step_header(&line) {
            if let Some((d, _)) = current.take() {
                drafts.push(d);
            }
            current = Some((
                Draft {
                    header: n,
                    title,
                    ..Draft::default()
                },
                Field::Title,
            ));
            continue;
        }
        if let Some(ans) = answer_line(&line) {
            final_answer = Some(ans.trim_matches(['*', '`', '"']).trim().to_string());
            if let Some((d, _)) = current.take() {
                drafts.push(d);
            }
            continue;
        }
        let Some((draft, active)) = current.as_mut() else {
            continue;
        };
        match field(&line) {
            Some((f, text)) => {
                *active = f;
                draft.push(f, text);
            }
            None => draft.push(*active, line),
        }
    }
    if let Some((d, _)) = current.take() {
        drafts.push(d);
    }

    let mut warnings = Vec::new();
    let mut steps = Vec::new();
    for d in drafts {
        let (category, names) = split_skill_line(&d.skill);
        let index = steps.len() as u32 + 1;
        let mention = SkillMention::new(instance_id, index, category, names);
        if mention.names.is_empty() {
            warnings.push(ParseWarning::StepWithoutSkill { header: d.header });
            continue;
        }
        if d.header != index {
            warnings.push(ParseWarning::Renumbered {
                header: d.header,
                index,
            });
        }
        let conclusion = join_lines(&d.conclusion);
        if conclusion.is_empty() {
            warnings.push(ParseWarning::MissingConclusion { step: index });
        }
        steps.push(RationaleStep {
            index,
            title: d.title,
            skill: mention,
            evidence: join_lines(&d.evidence),
            conclusion,
        });
    }
    if steps.is_empty() {
        return Err(ParseError::NoSteps {
            instance_id: instance_id.to_string(),
            raw: raw.to_string(),
        });
    }
    let final_answer = final_answer.unwrap_or_else(|| {
        warnings.push(ParseWarning::MissingAnswer);
        String::new()
    });
    Ok(Rationale {
        instance_id: instance_id.to_string(),
        annotator_model: model.to_string(),
        raw_text: raw.to_string(),
        steps,
        final_answer,
        parse_warnings: warnings,
    })
}

/// Parses a bulleted or numbered list into one mention per item
/// (`step_index` 0). Responses without list items yield nothing.
pub fn parse_skill_list(raw: &str, instance_id: &str) -> Vec<SkillMention> {
    static ITEM: OnceLock<Regex> = OnceLock::new();
    let item = re(&ITEM, r"^\s*(?:[-*•+]|\d{1,3}[.)])\s+(.+)$");
    raw.lines()
        .filter_map(|l| item.captures(l))
        .map(|c| clean_line(&c[1]))
        .filter(|t| !t.is_empty())
        .map(|t| SkillMention::new(instance_id, 0, "", [t]))
        .filter(|m| !m.names.is_empty())
        .collect()
}
