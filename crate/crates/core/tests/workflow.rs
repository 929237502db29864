use std::sync::Arc;

use skillslice::annotator::annotate_corpus;
use skillslice::gateway::{CachedEmbedder, Cassette, ChatBackend, ChatRequest, Gateway, GatewayError, RecordingBackend, ReplayBackend, ToyHashEmbedder};
use skillslice::model::{Corpus, EvaluationInstance};
use skillslice::prompts::PromptSet;
use skillslice::skillspace::{dedup_loop, DedupParams, EmbeddingTable};
use skillslice::slicing::build_slices;

/// Writes a two-step rationale whose skills depend on the question's topic.
struct Annotator;

impl ChatBackend for Annotator {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let (skill, claim) = if req.user_prompt.contains("apples") {
            ("Reasoning: Arithmetic, Addition, Adding small numbers", "The total is the sum.")
        } else {
            ("Knowledge: Geography, Capital cities, European capitals", "The capital is named.")
        };
        let text = format!(
            "Step 1: Read the question\n- Skill: Knowledge: Reading comprehension, Question parsing, Locating the ask\n- Evidence: the question text\n- Conclusion: The question is understood.\n\n\
             Step 2: Solve\n- Skill: {skill}\n- Evidence: the facts given\n- Conclusion: {claim}\n\n**ANSWER: A**"
        );
        Ok(vec![text; req.n_samples as usize])
    }
}

fn corpus() -> Corpus {
    let mut instances: Vec<EvaluationInstance> = (0..6)
        .map(|i| EvaluationInstance::text("math", &format!("{i}"), format!("Tom has {i} apples and gets two more. How many?"), "A"))
        .collect();
    instances.extend((0..4).map(|i| EvaluationInstance::text("geo", &format!("{i}"), format!("Which city is the capital of country {i}?"), "A")));
    Corpus::new(instances).unwrap()
}

#[test]
fn recorded_annotations_replay_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cassette.jsonl");
    let prompts = PromptSet::default();

    let cassette = Arc::new(Cassette::open(&path).unwrap());
    let recorder = Gateway::new(Arc::new(RecordingBackend::new(Annotator, cassette.clone())));
    let mut live = corpus();
    let recorded = annotate_corpus(&mut live, &recorder, &prompts, "annotator", vec![], 4, |_| {});
    assert!(recorded.failures.is_empty());
    cassette.compact().unwrap();

    let replayer = Gateway::new(Arc::new(ReplayBackend::new(Arc::new(Cassette::open(&path).unwrap()))));
    let mut again = corpus();
    let replayed = annotate_corpus(&mut again, &replayer, &prompts, "annotator", vec![], 3, |_| {});
    assert_eq!(recorded.rationales, replayed.rationales);
    assert_eq!(live.annotations, again.annotations);

    let unseen = annotate_corpus(&mut again, &replayer, &prompts, "someone-else", vec![], 3, |_| {});
    assert_eq!(unseen.failures.len(), 10);
    assert!(unseen.failures[0].error.contains("no scripted response"), "{}", unseen.failures[0].error);
}

#[test]
fn annotations_become_overlapping_slices() {
    let mut c = corpus();
    let gw = Gateway::new(Arc::new(Annotator));
    let out = annotate_corpus(&mut c, &gw, &PromptSet::default(), "annotator", vec![], 8, |_| {});
    assert_eq!(out.rationales.len(), 10);

    let embedder = CachedEmbedder::new(Box::new(ToyHashEmbedder::new(128)));
    let skills = c.all_skills();
    let table = EmbeddingTable::<f64>::embed(skills.clone(), &embedder).unwrap();
    let (index, report) = dedup_loop(&skills, &table, &c.skill_instances(), &embedder.id(), DedupParams::default()).unwrap();
    index.validate().unwrap();
    assert!(report.cluster_counts.windows(2).all(|w| w[1] <= w[0]));

    let slices = build_slices(&index, 4);
    let sizes: Vec<usize> = slices.iter().map(|s| s.size).collect();
    assert!(sizes.contains(&10), "reading skills cover every instance: {sizes:?}");
    assert!(sizes.contains(&6) && sizes.contains(&4), "{sizes:?}");
    let covered: usize = slices.iter().map(|s| s.size).sum();
    assert!(covered > c.len(), "slices overlap");
}
