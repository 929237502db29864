//! Prompt templates. Defaults are compiled in from `prompts/*.txt`; a
//! prompt directory may override any of them by file name.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub rationale: String,
    pub direct_skills: String,
    pub answer: String,
    pub verify: String,
    pub probe_generation: String,
    pub probe_answer: String,
    pub consistency_judge: String,
    pub attributes: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            rationale: include_str!("../prompts/rationale_system.txt").to_string(),
            direct_skills: include_str!("../prompts/direct_skills_system.txt").to_string(),
            answer: include_str!("../prompts/answer_system.txt").to_string(),
            verify: include_str!("../prompts/verify_system.txt").to_string(),
            probe_generation: include_str!("../prompts/probe_generation_system.txt").to_string(),
            probe_answer: include_str!("../prompts/probe_answer_system.txt").to_string(),
            consistency_judge: include_str!("../prompts/consistency_judge_system.txt").to_string(),
            attributes: include_str!("../prompts/attributes_system.txt").to_string(),
        }
    }
}

impl PromptSet {
    pub const FILES: [&'static str; 8] = [
        "rationale_system.txt",
        "direct_skills_system.txt",
        "answer_system.txt",
        "verify_system.txt",
        "probe_generation_system.txt",
        "probe_answer_system.txt",
        "consistency_judge_system.txt",
        "attributes_system.txt",
    ];

    /// Defaults overridden by whichever template files exist in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("prompt directory {} does not exist", dir.display())));
        }
        let mut set = Self::default();
        for name in Self::FILES {
            let path = dir.join(name);
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *set.slot(name) = text;
            }
        }
        Ok(set)
    }

    fn slot(&mut self, file: &str) -> &mut String {
        match file {
            "rationale_system.txt" => &mut self.rationale,
            "direct_skills_system.txt" => &mut self.direct_skills,
            "answer_system.txt" => &mut self.answer,
            "verify_system.txt" => &mut self.verify,
            "probe_generation_system.txt" => &mut self.probe_generation,
            "probe_answer_system.txt" => &mut self.probe_answer,
            "consistency_judge_system.txt" => &mut self.consistency_judge,
            "attributes_system.txt" => &mut self.attributes,
            _ => unreachable!("unknown prompt file {file}"),
        }
    }

    /// The in-context example response embedded in the rationale prompt.
    pub fn rationale_example(&self) -> Option<&str> {
        let start = self.rationale.find("**Example Response Structure:**")?;
        let body = &self.rationale[start..];
        let body = &body[body.find('\n')? + 1..];
        let end = body.find("**Final Note:**").unwrap_or(body.len());
        Some(body[..end].trim_end())
    }
}
