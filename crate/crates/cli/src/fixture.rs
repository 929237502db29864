//! The bundled 30-instance fixture: corpus, simulator script, config and a
//! cassette recorded by running every stage against the simulator.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use skillslice::config::{ChatMode, PipelineConfig};
use skillslice::jsonl;
use skillslice::model::EvaluationInstance;

use crate::backend;
use crate::simulated::{ModelProfile, Script, ScriptedInstance, ScriptedSkill};

pub const INSTANCES: &str = "instances.jsonl";
pub const SCRIPT: &str = "script.json";
pub const CONFIG: &str = "config.json";
pub const CASSETTE: &str = "cassette.jsonl";

fn skill(category: &str, names: [&str; 3], claim: String) -> ScriptedSkill {
    ScriptedSkill {
        category: category.into(),
        names: names.iter().map(|s| s.to_string()).collect(),
        claim,
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

/// Puts `right` at position `at` among `wrong`, labelled A, B, ...
fn choices(right: &str, wrong: &[&str], at: usize) -> (Vec<(String, String)>, String) {
    let mut texts: Vec<String> = wrong.iter().map(|s| s.to_string()).collect();
    let at = at % (texts.len() + 1);
    texts.insert(at, right.to_string());
    let l = labels(texts.len());
    (l.iter().cloned().zip(texts).collect(), l[at].clone())
}

fn math(i: usize) -> ScriptedInstance {
    let id = format!("{:02}", i + 1);
    let (question, gold, skills) = match i % 4 {
        0 | 2 => {
            let (a, b, n) = (3 + i, 4 + 2 * i, 2 + i % 3);
            (
                format!("A pen costs {a} dollars and a notebook costs {b} dollars. How many dollars do {n} pens and one notebook cost?"),
                (n * a + b).to_string(),
                vec![
                    skill("Reasoning", ["Arithmetic", "Multiplication", "Totaling prices"], format!("{n} pens cost {} dollars.", n * a)),
                    skill("Knowledge", ["Reading comprehension", "Extracting quantities", "Identifying prices"], format!("A pen costs {a} dollars.")),
                ],
            )
        }
        1 => {
            let (w, h) = (2 + i, 3 + i);
            (
                format!("A rectangle is {w} cm wide and {h} cm tall. What is its area in square cm?"),
                (w * h).to_string(),
                vec![
                    skill("Reasoning", ["Geometry", "Area computation", "Rectangle area formula"], "The area of a rectangle is width times height.".into()),
                    skill("Reasoning", ["Arithmetic", "Multiplication", "Multiplying two integers"], format!("{w} times {h} is {}.", w * h)),
                ],
            )
        }
        _ => {
            let m = 2 + i;
            (
                format!("How many centimeters are there in {m} meters?"),
                (m * 100).to_string(),
                vec![
                    skill("Knowledge", ["Unit conversion", "Metric units", "Meters to centimeters"], "One meter is one hundred centimeters.".into()),
                    skill("Reasoning", ["Arithmetic", "Multiplication", "Scaling by powers of ten"], format!("{m} times one hundred is {}.", m * 100)),
                ],
            )
        }
    };
    ScriptedInstance {
        instance: EvaluationInstance::text("mathqa", &id, question, gold),
        skills,
        attributes: vec!["word problem".into(), "whole numbers".into(), "everyday objects".into()],
    }
}

const NAMES: [&str; 10] = ["Ana", "Ben", "Chen", "Dara", "Eli", "Fay", "Gus", "Hana", "Ivo", "Jun"];

fn reading(i: usize) -> ScriptedInstance {
    let id = format!("{:02}", i + 1);
    let who = NAMES[i];
    let (question, right, wrong, skills, attrs): (String, &str, Vec<&str>, _, Vec<&str>) = if i % 2 == 0 {
        (
            format!("{who} planted {} trees on Monday and watered them on Tuesday. What did {who} do on Tuesday?", 2 + i),
            "watered the trees",
            vec!["planted the trees", "sold the trees", "cut the trees"],
            vec![
                skill("Knowledge", ["Reading comprehension", "Locating details", "Finding the event on a given day"], format!("{who} watered the trees on Tuesday.")),
                skill("Reasoning", ["Temporal reasoning", "Event ordering", "Matching days to events"], "Tuesday comes after Monday.".into()),
            ],
            vec!["short story", "gardening", "days of the week"],
        )
    } else {
        (
            format!("All glorps are blue. {who} owns a glorp named Pim. Is Pim blue?"),
            "yes",
            vec!["no", "cannot be determined"],
            vec![
                skill("Reasoning", ["Logical deduction", "Syllogistic reasoning", "Applying a universal rule"], "Every glorp is blue, so Pim is blue.".into()),
                skill("Knowledge", ["Reading comprehension", "Understanding the question", "Parsing a premise"], "Pim is a glorp.".into()),
            ],
            vec!["invented creatures", "colors", "pets"],
        )
    };
    let (c, gold) = choices(right, &wrong, i);
    ScriptedInstance {
        instance: EvaluationInstance::text("readbench", &id, question, gold).with_choices(c),
        skills,
        attributes: attrs.into_iter().map(String::from).collect(),
    }
}

const PRODUCTS: [&str; 6] = ["apples", "pears", "plums", "kiwis", "limes", "figs"];

fn chart(i: usize) -> ScriptedInstance {
    let id = format!("{:02}", i + 1);
    let p = [PRODUCTS[i % 6], PRODUCTS[(i + 1) % 6], PRODUCTS[(i + 2) % 6]];
    let top = p[i % 3];
    let wrong: Vec<&str> = p.iter().copied().filter(|x| *x != top).collect();
    let mut skills = vec![
        skill("Perception", ["Visual recognition", "Bar chart reading", "Identifying the longest bar"], format!("The longest bar in the chart is for {top}.")),
        skill("Reasoning", ["Comparison", "Comparing magnitudes", "Ranking bar heights"], format!("Sales of {top} exceed the other products.")),
    ];
    let question = if i % 3 == 0 {
        skills.push(skill("Reasoning", ["Arithmetic", "Subtraction", "Computing differences"], format!("{top} lead the next product by a clear margin.")));
        format!("The bar chart shows weekly sales of {}, {} and {}. Which product sold the most, and by a margin of at least ten units?", p[0], p[1], p[2])
    } else {
        format!("The bar chart shows weekly sales of {}, {} and {}. Which product has the longest bar?", p[0], p[1], p[2])
    };
    let (c, gold) = choices(top, &wrong, i + 1);
    ScriptedInstance {
        instance: EvaluationInstance::text("chartvqa", &id, question, gold)
            .with_choices(c)
            .with_image(format!("images/chart-{id}.png")),
        skills,
        attributes: vec!["bar chart".into(), "fruit sales".into(), "weekly figures".into()],
    }
}

fn profile(pairs: &[(&str, f64)], default: f64, noise: f64) -> ModelProfile {
    ModelProfile {
        proficiency: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        default_proficiency: default,
        verifier_noise: noise,
    }
}

pub fn script() -> Script {
    let mut instances: Vec<ScriptedInstance> = (0..10).map(math).collect();
    instances.extend((0..10).map(reading));
    instances.extend((0..10).map(chart));
    let models = BTreeMap::from([
        (
            "sim-alpha".to_string(),
            profile(&[("arithmetic", 0.95), ("geometry", 0.9), ("unit conversion", 0.9), ("visual recognition", 0.3)], 0.45, 0.0),
        ),
        (
            "sim-beta".to_string(),
            profile(&[("reading comprehension", 0.95), ("temporal reasoning", 0.9), ("logical deduction", 0.9), ("arithmetic", 0.4)], 0.45, 0.0),
        ),
        (
            "sim-gamma".to_string(),
            profile(&[("visual recognition", 0.95), ("comparison", 0.9), ("reading comprehension", 0.3)], 0.45, 0.0),
        ),
        ("sim-verifier-a".to_string(), profile(&[], 0.5, 0.0)),
        ("sim-verifier-b".to_string(), profile(&[], 0.5, 0.1)),
    ]);
    Script { instances, models }
}

pub fn config_json() -> serde_json::Value {
    serde_json::json!({
        "backend": {
            "mode": "replay",
            "cassette": CASSETTE,
            "simulated_script": SCRIPT,
            "record_upstream": "simulated",
            "embedding": {"kind": "toy_hash", "dim": 256}
        },
        "models": {
            "annotator": "sim-annotator",
            "answerers": ["sim-alpha", "sim-beta", "sim-gamma"],
            "verifiers": ["sim-verifier-a", "sim-verifier-b"],
            "probe_generator": "sim-annotator",
            "judge": "sim-judge",
            "default_route": "sim-alpha"
        },
        "thresholds": {"cluster": 0.95, "negative_tau": 0.85, "match": 0.85, "min_slice": 3, "dedup_residual": 0.005},
        "cache_dir": ".cache",
        "concurrency": 4,
        "seed": 7,
        "batch_size": 16,
        "probing": {
            "per_group": 2,
            "limits": {"max_claims": 5, "min_claims": 1},
            "sampling": {"temperature": 0.7, "samples": 3}
        },
        "retrieval": {
            "queries": ["Totaling prices", "Reading comprehension", "Bar chart reading"],
            "k": 5
        }
    })
}

/// Writes the fixture into `dir`, recording a fresh cassette.
pub fn write_fixture(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let script = script();
    let instances: Vec<&EvaluationInstance> = script.instances.iter().map(|s| &s.instance).collect();
    jsonl::write(&dir.join(INSTANCES), &instances)?;
    jsonl::write_json(&dir.join(SCRIPT), &script)?;
    jsonl::write_json(&dir.join(CONFIG), &config_json())?;

    let cassette = dir.join(CASSETTE);
    if cassette.exists() {
        std::fs::remove_file(&cassette)?;
    }
    let scratch = dir.join(".record");
    let mut config = PipelineConfig::load(&dir.join(CONFIG))?;
    config.backend.mode = ChatMode::Record;
    config.cache_dir = scratch.join("cache");
    let assembled = backend::assemble(config, &scratch, "record")?;
    let outcome = assembled.pipeline.run_all(&dir.join(INSTANCES)).context("recording the fixture run");
    assembled.finish()?;
    std::fs::remove_dir_all(&scratch)?;
    outcome?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_valid_and_balanced() {
        let s = script();
        let corpus = skillslice::model::Corpus::new(s.instances.iter().map(|i| i.instance.clone()).collect()).unwrap();
        assert_eq!(corpus.len(), 30);
        let benches: std::collections::BTreeSet<&str> = corpus.instances().iter().map(|i| i.benchmark.as_str()).collect();
        assert_eq!(benches.len(), 3);
        assert!(s.instances.iter().all(|i| !i.skills.is_empty()));
    }
}
