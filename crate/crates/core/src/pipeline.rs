//! Stage functions over a run directory.
//!
//! Each stage reads only artifacts written by earlier stages (plus the
//! configuration) and rewrites its own outputs in full, so rerunning a stage
//! on unchanged inputs reproduces its files byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{annotate_corpus, AnnotationFailure, Rationale, RATIONALES_FILE};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gateway::{CachedEmbedder, ChatRequest, Gateway};
use crate::jsonl;
use crate::model::{extract_answer, grade, Corpus, EvaluationInstance, ModelAnswer, SkillMention, INSTANCES_FILE};
use crate::probing::{self, ProbeResult, ProbeRun, ProbeSet};
use crate::prompts::PromptSet;
use crate::retrieval::{self, InstanceAttributes, Method, RetrievalQuery, RetrievalReport};
use crate::rng::substream;
use crate::router::{self, Router, RoutingEvaluation};
use crate::skillspace::{self, DedupParams, EmbeddingTable, SkillIndex, GRANULARITY_BINS};
use crate::slicing::{self, SkillSlice, SliceAccuracyTable};
use crate::stats;
use crate::validation::{self, VerificationItem, VerifierSummary};
use crate::ClusterId;

pub const ANSWERS_FILE: &str = crate::model::ANSWERS_FILE;
pub const ANNOTATIONS_FILE: &str = crate::model::ANNOTATIONS_FILE;
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const SKILLS_FILE: &str = "skills.json";
pub const DEDUP_REPORT_FILE: &str = "dedup_report.json";
pub const GRANULARITY_FILE: &str = "granularity.json";
pub const BENCHMARK_FILE: &str = "benchmark_accuracies.json";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Answer,
    Annotate,
    Cluster,
    Slice,
    Evaluate,
    Verify,
    Route,
    Probe,
    Retrieve,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Answer,
        Stage::Annotate,
        Stage::Cluster,
        Stage::Slice,
        Stage::Evaluate,
        Stage::Verify,
        Stage::Route,
        Stage::Probe,
        Stage::Retrieve,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Answer => "answer",
            Stage::Annotate => "annotate",
            Stage::Cluster => "cluster",
            Stage::Slice => "slice",
            Stage::Evaluate => "evaluate",
            Stage::Verify => "verify",
            Stage::Route => "route",
            Stage::Probe => "probe",
            Stage::Retrieve => "retrieve",
            Stage::Report => "report",
        }
    }
}

/// `<out>/<run-id>/{instances,rationales,skills,index,slices,verification,routing,probes,retrieval,reports}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub const DIRS: [&'static str; 10] = [
        "instances",
        "rationales",
        "skills",
        "index",
        "slices",
        "verification",
        "routing",
        "probes",
        "retrieval",
        "reports",
    ];

    pub fn new(out_dir: &Path, run_id: &str) -> Self {
        Self {
            root: out_dir.join(run_id),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, dir: &str, file: &str) -> PathBuf {
        debug_assert!(Self::DIRS.contains(&dir), "unknown run directory {dir}");
        self.root.join(dir).join(file)
    }

    /// The path, or `MissingArtifact` when no earlier stage wrote it.
    pub fn require(&self, dir: &str, file: &str) -> Result<PathBuf> {
        let p = self.path(dir, file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn output(&self, dir: &str, file: &str) -> Result<PathBuf> {
        let d = self.root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d.join(file))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query: String,
    pub instance_id: String,
    pub relevant: bool,
}

/// Everything a stage needs: configuration, prompts, backends and where
/// the run lives.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub prompts: PromptSet,
    pub gateway: Gateway,
    pub embedder: CachedEmbedder,
    pub layout: RunLayout,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    jsonl::write_atomic(path, text.as_bytes())
}

impl Pipeline {
    fn models(&self) -> &crate::config::ModelConfig {
        &self.config.models
    }

    fn instances_path(&self) -> Result<PathBuf> {
        self.layout.require("instances", INSTANCES_FILE)
    }

    /// Instances with answers and, when asked, the annotate stage's skills.
    pub fn load_corpus(&self, annotations: bool) -> Result<Corpus> {
        let path = self.instances_path()?;
        let mut corpus = Corpus::load(path.parent().unwrap())?;
        if annotations {
            let p = self.layout.require("skills", ANNOTATIONS_FILE)?;
            let mentions: Vec<SkillMention> = jsonl::read(&p)?;
            let mut grouped: BTreeMap<String, Vec<SkillMention>> = BTreeMap::new();
            for m in mentions {
                grouped.entry(m.instance_id.clone()).or_default().push(m);
            }
            for (id, ms) in grouped {
                corpus.set_annotations(&id, ms)?;
            }
        }
        Ok(corpus)
    }

    fn require_answers(&self, corpus: &Corpus) -> Result<()> {
        self.layout.require("instances", ANSWERS_FILE)?;
        for m in &self.models().answerers {
            if !corpus.answers.contains_key(m) {
                return Err(Error::Config(format!("no answers recorded for model {m:?}; rerun the answer stage")));
            }
        }
        Ok(())
    }

    fn load_index(&self) -> Result<SkillIndex> {
        SkillIndex::load(&self.layout.require("index", skillspace::INDEX_FILE)?)
    }

    fn load_table(&self) -> Result<SliceAccuracyTable> {
        jsonl::read_json(&self.layout.require("slices", slicing::SLICE_ACCURACIES_FILE)?)
    }

    fn load_rationales(&self) -> Result<Vec<Rationale>> {
        jsonl::read(&self.layout.require("rationales", RATIONALES_FILE)?)
    }

    /// Validates `instances` (and optionally pre-computed `answers`) and
    /// copies them into the run.
    pub fn ingest(&self, instances: &Path, answers: Option<&Path>) -> Result<Vec<PathBuf>> {
        let list: Vec<EvaluationInstance> = jsonl::read(instances)?;
        let mut corpus = Corpus::new(list)?;
        if let Some(a) = answers {
            let rows: Vec<ModelAnswer> = jsonl::read(a)?;
            let regraded = rows
                .into_iter()
                .map(|mut r| {
                    r.correct = grade(&r.extracted_answer, corpus.get(&r.instance_id)?);
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            corpus.add_answers(regraded)?;
        }
        let out = self.layout.output("instances", INSTANCES_FILE)?;
        corpus.save(out.parent().unwrap())?;
        log::info!("ingested {} instances", corpus.len());
        let mut written = vec![out];
        if answers.is_some() {
            written.push(self.layout.path("instances", ANSWERS_FILE));
        }
        Ok(written)
    }

    /// Asks every answerer model every question and grades the replies.
    pub fn answer(&self) -> Result<Vec<PathBuf>> {
        let mut corpus = self.load_corpus(false)?;
        let mut reqs = Vec::new();
        let mut keys = Vec::new();
        for model in &self.models().answerers {
            for inst in corpus.instances() {
                reqs.push(
                    ChatRequest::new(model, self.prompts.answer.clone(), inst.render_question())
                        .with_image(inst.image_ref.clone()),
                );
                keys.push((model.clone(), inst.id.clone()));
            }
        }
        let mut answers = Vec::with_capacity(reqs.len());
        for ((model, id), res) in keys.into_iter().zip(self.gateway.complete_all(&reqs)) {
            let raw = res?.remove(0);
            let extracted = extract_answer(&raw);
            let correct = grade(&extracted, corpus.get(&id)?);
            answers.push(ModelAnswer {
                instance_id: id,
                model,
                raw_response: raw,
                extracted_answer: extracted,
                correct,
            });
        }
        corpus.add_answers(answers)?;
        let out = self.layout.output("instances", ANSWERS_FILE)?;
        jsonl::write(&out, &corpus.answers.values().flatten().collect::<Vec<_>>())?;
        Ok(vec![out])
    }

    /// Writes rationales for every instance, resuming from earlier output.
    pub fn annotate(&self) -> Result<Vec<PathBuf>> {
        let mut corpus = self.load_corpus(false)?;
        let rat_path = self.layout.output("rationales", RATIONALES_FILE)?;
        let prior: Vec<Rationale> = jsonl::read_or_empty(&rat_path)?;
        let outcome = annotate_corpus(
            &mut corpus,
            &self.gateway,
            &self.prompts,
            &self.models().annotator,
            prior,
            self.config.batch_size,
            |so_far| {
                if let Err(e) = jsonl::write(&rat_path, so_far) {
                    log::warn!("checkpoint failed: {e}");
                }
            },
        );
        if outcome.resumed > 0 {
            log::info!("resumed {} rationales from an earlier run", outcome.resumed);
        }
        for f in &outcome.failures {
            log::warn!("annotation failed for {}: {}", f.instance_id, f.error);
        }
        jsonl::write(&rat_path, &outcome.rationales)?;
        let fail_path = self.layout.output("rationales", FAILURES_FILE)?;
        jsonl::write::<AnnotationFailure>(&fail_path, &outcome.failures)?;
        let ann_path = self.layout.output("skills", ANNOTATIONS_FILE)?;
        jsonl::write(&ann_path, &corpus.annotations.values().flatten().collect::<Vec<_>>())?;
        let skills_path = self.layout.output("skills", SKILLS_FILE)?;
        jsonl::write_json(&skills_path, &corpus.all_skills())?;
        Ok(vec![rat_path, fail_path, ann_path, skills_path])
    }

    pub fn cluster(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(true)?;
        let skills = corpus.all_skills();
        let table = EmbeddingTable::embed(skills.clone(), &self.embedder)?;
        let t = &self.config.thresholds;
        let params = DedupParams {
            threshold: t.cluster,
            residual: t.dedup_residual,
            ..DedupParams::default()
        };
        let (index, report) = skillspace::dedup_loop(&skills, &table, &corpus.skill_instances(), &self.embedder.id(), params)?;
        log::info!(
            "{} skills -> {} clusters in {} pass(es)",
            report.input_skills,
            index.clusters.len(),
            report.iterations
        );
        let hist = skillspace::granularity_histogram(&index, &GRANULARITY_BINS)?;
        let hist: Vec<BinCount> = GRANULARITY_BINS
            .iter()
            .zip(hist)
            .map(|(b, count)| BinCount { bin: b.label(), count })
            .collect();
        let idx_path = self.layout.output("index", skillspace::INDEX_FILE)?;
        index.save(&idx_path)?;
        let rep_path = self.layout.output("index", DEDUP_REPORT_FILE)?;
        jsonl::write_json(&rep_path, &report)?;
        let hist_path = self.layout.output("index", GRANULARITY_FILE)?;
        jsonl::write_json(&hist_path, &hist)?;
        Ok(vec![idx_path, rep_path, hist_path])
    }

    pub fn slice(&self, min_size: Option<usize>) -> Result<Vec<PathBuf>> {
        let index = self.load_index()?;
        let min = min_size.unwrap_or(self.config.thresholds.min_slice);
        if min == 0 {
            return Err(Error::Config("minimum slice size must be at least 1".into()));
        }
        let slices = slicing::build_slices(&index, min);
        log::info!("{} slices with at least {min} instances", slices.len());
        let out = self.layout.output("slices", slicing::SLICES_FILE)?;
        jsonl::write_json(&out, &slices)?;
        Ok(vec![out])
    }

    fn load_slices(&self) -> Result<Vec<SkillSlice>> {
        jsonl::read_json(&self.layout.require("slices", slicing::SLICES_FILE)?)
    }

    /// Slice accuracy table plus comparison and benchmark reports.
    pub fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(false)?;
        self.require_answers(&corpus)?;
        let slices = self.load_slices()?;
        let models = &self.models().answerers;
        let table = SliceAccuracyTable::build(&corpus, &slices, models);
        let t_path = self.layout.output("slices", slicing::SLICE_ACCURACIES_FILE)?;
        jsonl::write_json(&t_path, &table)?;

        let txt_path = self.layout.output("reports", "slice_accuracies.txt")?;
        write_text(&txt_path, &slicing::render_table(&table))?;
        let mut cmp = String::new();
        if models.len() > 1 {
            for m in models {
                let others: Vec<String> = models.iter().filter(|o| *o != m).cloned().collect();
                cmp.push_str(&slicing::render_comparison(&slicing::compare_models(&table, m, &others), 10));
                cmp.push('\n');
            }
        }
        let cmp_path = self.layout.output("reports", "model_comparisons.txt")?;
        write_text(&cmp_path, &cmp)?;
        let bench: BTreeMap<&String, _> = models.iter().map(|m| (m, slicing::benchmark_accuracies(&corpus, m))).collect();
        let b_path = self.layout.output("reports", BENCHMARK_FILE)?;
        jsonl::write_json(&b_path, &bench)?;
        Ok(vec![t_path, txt_path, cmp_path, b_path])
    }

    /// Mixed positive/negative skill lists judged by every verifier.
    pub fn verify(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(true)?;
        let all = corpus.all_skills();
        let table = EmbeddingTable::embed(all.clone(), &self.embedder)?;
        let tau = self.config.thresholds.negative_tau;
        let seed = self.config.seed;

        let mut plans: Vec<(&EvaluationInstance, Vec<String>, Vec<String>)> = Vec::new();
        for inst in corpus.instances() {
            let positives = corpus.instance_skills(&inst.id);
            if positives.is_empty() {
                continue;
            }
            let mut rng = substream(seed, "negatives", &inst.id);
            let neg = match validation::sample_negatives(&inst.id, &positives, &all, &table, tau, positives.len(), &mut rng) {
                Ok(n) => n,
                Err(validation::ValidationError::NoEligibleNegatives(id)) => {
                    log::warn!("{id}: no eligible negatives; skipped");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let positives = if neg.shortfall > 0 {
                let mut rng = substream(seed, "positives", &inst.id);
                positives.choose_multiple(&mut rng, neg.skills.len()).cloned().collect()
            } else {
                positives
            };
            plans.push((inst, positives, neg.skills));
        }

        let mut reqs = Vec::new();
        let mut batches = Vec::new();
        for verifier in &self.models().verifiers {
            for (inst, pos, neg) in &plans {
                let mut rng = substream(seed, "verify-order", &format!("{verifier}\u{1f}{}", inst.id));
                let (req, items) = validation::build_verification_prompt(inst, pos, neg, &self.prompts, verifier, &mut rng)?;
                reqs.push(req);
                batches.push(items);
            }
        }
        let mut results: Vec<VerificationItem> = Vec::new();
        for (mut items, res) in batches.into_iter().zip(self.gateway.complete_all(&reqs)) {
            let raw = res?.remove(0);
            let verdicts = validation::parse_verdicts(&raw, items.len());
            for (item, v) in items.iter_mut().zip(verdicts) {
                if v.is_none() {
                    log::warn!("{}: no verdict for {:?}; counted as irrelevant", item.instance_id, item.skill);
                }
                item.verdict = Some(v.unwrap_or(false));
            }
            results.extend(items);
        }
        let r_path = self.layout.output("verification", validation::RESULTS_FILE)?;
        jsonl::write(&r_path, &results)?;

        let correctness = corpus.correctness(&self.models().annotator);
        let split = (!correctness.is_empty()).then_some(&correctness);
        let summary = validation::summarize_verifiers(&results, split)?;
        let s_path = self.layout.output("reports", "verification.json")?;
        jsonl::write_json(&s_path, &summary)?;
        Ok(vec![r_path, s_path])
    }

    pub fn route(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(true)?;
        // Routing reads slice statistics, so the slice stage must have run.
        self.layout.require("slices", slicing::SLICES_FILE)?;
        self.require_answers(&corpus)?;
        let index = self.load_index()?;
        let models = &self.models().answerers;
        let router = Router::new(&corpus, &index, models, &self.models().default_route, self.config.thresholds.min_slice)?;
        let decisions = router.route_all();
        let eval = router::evaluate_routing(&corpus, models, &decisions);
        let d_path = self.layout.output("routing", router::DECISIONS_FILE)?;
        jsonl::write(&d_path, &decisions)?;
        let r_path = self.layout.output("routing", router::REPORT_FILE)?;
        jsonl::write_json(&r_path, &eval)?;
        let t_path = self.layout.output("reports", "routing.txt")?;
        write_text(&t_path, &eval.render())?;
        Ok(vec![d_path, r_path, t_path])
    }

    /// Probe sets for the lowest, median and highest accuracy slices, run
    /// against every answerer.
    pub fn probe(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(false)?;
        let table = self.load_table()?;
        let index = self.load_index()?;
        let rationales = self.load_rationales()?;
        let models = &self.models().answerers;
        let p = &self.config.probing;
        let groups = probing::select_probe_skills(&table, models, p.per_group)?;

        let mut sets: Vec<ProbeSet> = Vec::new();
        for id in groups.all() {
            let Some(cluster) = index.cluster(id) else {
                return Err(Error::Config(format!("slice table names cluster {id} missing from the index")));
            };
            let excerpts = probing::excerpts_for(cluster, &rationales);
            match probing::generate_probe_set(id, &cluster.name, &excerpts, &self.gateway, &self.prompts, &self.models().probe_generator, p.limits) {
                Ok(s) => sets.push(s),
                Err(e @ (probing::ProbeError::NoExcerpts { .. } | probing::ProbeError::TooFewClaims { .. })) => {
                    log::warn!("skipping {:?}: {e}", cluster.name);
                }
                Err(e) => return Err(e.into()),
            }
        }
        let s_path = self.layout.output("probes", probing::PROBE_SETS_FILE)?;
        jsonl::write(&s_path, &sets)?;

        let run = ProbeRun {
            gateway: &self.gateway,
            prompts: &self.prompts,
            judge_model: &self.models().judge,
            sampling: p.sampling,
            rules: p.rules,
        };
        let mut results: Vec<ProbeResult> = Vec::new();
        for set in &sets {
            for m in models {
                results.push(probing::run_probe_set(set, m, |id| corpus.get(id).ok().cloned(), run)?);
            }
        }
        let r_path = self.layout.output("probes", probing::PROBE_RESULTS_FILE)?;
        jsonl::write(&r_path, &results)?;

        let points: Vec<(f64, f64)> = results
            .iter()
            .filter_map(|r| Some((r.inconsistency_rate, table.accuracy(&r.model, r.skill_cluster_id)?)))
            .collect();
        let mut deficiencies = BTreeMap::new();
        for m in models {
            let rates: BTreeMap<ClusterId, f64> = results
                .iter()
                .filter(|r| &r.model == m)
                .map(|r| (r.skill_cluster_id, r.inconsistency_rate))
                .collect();
            let probed = SliceAccuracyTable {
                slices: table.slices.iter().filter(|s| rates.contains_key(&s.cluster_id)).cloned().collect(),
                rows: table.rows.clone(),
            };
            deficiencies.insert(
                m.clone(),
                probing::diagnose_deficiencies(&probed, m, &rates, p.accuracy_threshold, p.inconsistency_threshold)?,
            );
        }
        let report = ProbeReport {
            groups: GroupIds {
                lowest: groups.lowest.clone(),
                median: groups.median.clone(),
                highest: groups.highest.clone(),
            },
            probed_skills: sets.len(),
            correlation: probing::correlate_inconsistency(&points),
            points: points.len(),
            deficiencies,
        };
        let rep_path = self.layout.output("reports", "probing.json")?;
        jsonl::write_json(&rep_path, &report)?;
        Ok(vec![s_path, r_path, rep_path])
    }

    fn attributes(&self, corpus: &Corpus) -> Result<(PathBuf, BTreeMap<String, Vec<String>>)> {
        let path = self.layout.output("retrieval", retrieval::ATTRIBUTES_FILE)?;
        let prior: Vec<InstanceAttributes> = jsonl::read_or_empty(&path)?;
        let mut attrs: BTreeMap<String, Vec<String>> = prior
            .into_iter()
            .filter(|a| corpus.contains(&a.instance_id))
            .map(|a| (a.instance_id, a.attributes))
            .collect();
        let todo: Vec<&EvaluationInstance> = corpus.instances().iter().filter(|i| !attrs.contains_key(&i.id)).collect();
        let reqs: Vec<ChatRequest> = todo
            .iter()
            .map(|i| retrieval::build_attribute_prompt(i, &self.prompts, &self.models().annotator))
            .collect();
        for (inst, res) in todo.iter().zip(self.gateway.complete_all(&reqs)) {
            let a = retrieval::parse_attributes(&res?.remove(0), &inst.id);
            attrs.insert(a.instance_id, a.attributes);
        }
        let rows: Vec<InstanceAttributes> = attrs
            .iter()
            .map(|(id, a)| InstanceAttributes {
                instance_id: id.clone(),
                attributes: a.clone(),
            })
            .collect();
        jsonl::write(&path, &rows)?;
        Ok((path, attrs))
    }

    /// The configured queries, or the names of the three largest slices.
    fn queries(&self) -> Result<Vec<String>> {
        if !self.config.retrieval.queries.is_empty() {
            return Ok(self.config.retrieval.queries.clone());
        }
        Ok(self.load_slices()?.into_iter().take(3).map(|s| s.name).collect())
    }

    /// Retrieves per query and method, then judges every retrieved instance
    /// against its query with the first verifier.
    pub fn retrieve(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(true)?;
        let (a_path, attrs) = self.attributes(&corpus)?;
        let features = retrieval::build_features(&corpus, &attrs, &self.embedder)?;
        let queries = self.queries()?;
        let cfg = &self.config.retrieval;

        let mut runs: Vec<(String, Method, Vec<String>)> = Vec::new();
        for q in &queries {
            let emb = self.embedder.embed_texts(std::slice::from_ref(q))?.remove(0);
            for &method in &cfg.methods {
                let query = RetrievalQuery::new(q.clone(), method).with_k(cfg.k);
                runs.push((q.clone(), method, retrieval::retrieve_top_k(&query, &emb, &features)?.ids));
            }
        }

        let pairs: BTreeSet<(&str, &str)> = runs
            .iter()
            .flat_map(|(q, _, ids)| ids.iter().map(move |id| (q.as_str(), id.as_str())))
            .collect();
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let verifier = &self.models().verifiers[0];
        let reqs = pairs
            .iter()
            .map(|(q, id)| Ok(retrieval::build_relevance_prompt(corpus.get(id)?, q, &self.prompts, verifier)))
            .collect::<Result<Vec<_>>>()?;
        let mut judgments = Vec::with_capacity(pairs.len());
        for ((q, id), res) in pairs.iter().zip(self.gateway.complete_all(&reqs)) {
            judgments.push(RelevanceJudgment {
                query: q.to_string(),
                instance_id: id.to_string(),
                relevant: retrieval::parse_relevance(&res?.remove(0)),
            });
        }
        let mut by_query: HashMap<&str, HashMap<String, bool>> = HashMap::new();
        for j in &judgments {
            by_query.entry(&j.query).or_default().insert(j.instance_id.clone(), j.relevant);
        }
        let empty = HashMap::new();
        let reports: Vec<RetrievalReport> = runs
            .into_iter()
            .map(|(q, method, ids)| {
                let precision = if ids.is_empty() {
                    None
                } else {
                    Some(retrieval::precision_at_k(&ids, by_query.get(q.as_str()).unwrap_or(&empty))?)
                };
                Ok(RetrievalReport {
                    query: q,
                    method,
                    ids,
                    precision,
                })
            })
            .collect::<Result<_>>()?;

        let j_path = self.layout.output("retrieval", JUDGMENTS_FILE)?;
        jsonl::write(&j_path, &judgments)?;
        let r_path = self.layout.output("retrieval", retrieval::REPORT_FILE)?;
        jsonl::write(&r_path, &reports)?;
        let t_path = self.layout.output("reports", "retrieval.txt")?;
        write_text(&t_path, &render_retrieval(&reports, &cfg.methods))?;
        Ok(vec![a_path, j_path, r_path, t_path])
    }

    /// Collects headline numbers from whatever stages have run and writes a
    /// checksum manifest of the run.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let corpus = self.load_corpus(false)?;
        let read_opt = |dir: &str, file: &str| -> Result<Option<serde_json::Value>> {
            let p = self.layout.path(dir, file);
            if p.is_file() {
                Ok(Some(jsonl::read_json(&p)?))
            } else {
                Ok(None)
            }
        };
        let accuracy: BTreeMap<String, Option<f64>> = corpus.answers.keys().map(|m| (m.clone(), corpus.accuracy(m))).collect();
        let index = self.layout.path("index", skillspace::INDEX_FILE);
        let index = if index.is_file() { Some(SkillIndex::load(&index)?) } else { None };
        let slices = self.layout.path("slices", slicing::SLICES_FILE);
        let slices: Option<Vec<SkillSlice>> = if slices.is_file() { Some(jsonl::read_json(&slices)?) } else { None };
        let verification: Option<VerifierSummary> = read_opt("reports", "verification.json")?.map(serde_json::from_value).transpose()?;
        let routing: Option<RoutingEvaluation> = read_opt("routing", router::REPORT_FILE)?.map(serde_json::from_value).transpose()?;
        let probing: Option<ProbeReport> = read_opt("reports", "probing.json")?.map(serde_json::from_value).transpose()?;
        let ret_path = self.layout.path("retrieval", retrieval::REPORT_FILE);
        let retrieval: Option<BTreeMap<Method, Option<f64>>> = if ret_path.is_file() {
            let rows: Vec<RetrievalReport> = jsonl::read(&ret_path)?;
            Some(mean_precision(&rows))
        } else {
            None
        };
        let summary = Summary {
            instances: corpus.len(),
            benchmarks: corpus.instances().iter().map(|i| i.benchmark.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
            accuracy,
            skills: index.as_ref().map(|i| i.skill_count()),
            clusters: index.as_ref().map(|i| i.clusters.len()),
            slices: slices.as_ref().map(|s| s.len()),
            mean_relevancy_rate: verification.as_ref().and_then(|v| v.mean_relevancy_rate),
            mean_false_positive_rate: verification.as_ref().and_then(|v| v.mean_false_positive_rate),
            routing_overall: routing.as_ref().map(|r| r.rows.iter().map(|row| (row.label.clone(), row.overall)).collect()),
            probe_correlation: probing.as_ref().and_then(|p| p.correlation),
            retrieval_precision: retrieval,
        };
        let s_path = self.layout.output("reports", SUMMARY_FILE)?;
        jsonl::write_json(&s_path, &summary)?;
        let m_path = self.layout.output("reports", MANIFEST_FILE)?;
        let manifest = checksum_manifest(self.layout.root(), &[m_path.as_path()])?;
        jsonl::write_json(&m_path, &manifest)?;
        Ok(vec![s_path, m_path])
    }

    pub fn run_stage(&self, stage: Stage, input: Option<&Path>) -> Result<Vec<PathBuf>> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Ingest => {
                let input = input.ok_or_else(|| Error::Config("ingest needs an instances file".into()))?;
                self.ingest(input, None)
            }
            Stage::Answer => self.answer(),
            Stage::Annotate => self.annotate(),
            Stage::Cluster => self.cluster(),
            Stage::Slice => self.slice(None),
            Stage::Evaluate => self.evaluate(),
            Stage::Verify => self.verify(),
            Stage::Route => self.route(),
            Stage::Probe => self.probe(),
            Stage::Retrieve => self.retrieve(),
            Stage::Report => self.report(),
        }
    }

    /// Every stage in order, starting from an instances file.
    pub fn run_all(&self, instances: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for s in Stage::ALL {
            out.extend(self.run_stage(s, Some(instances))?);
        }
        Ok(out)
    }
}

/// Number of clusters whose size falls in `bin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCount {
    pub bin: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupIds {
    pub lowest: Vec<ClusterId>,
    pub median: Vec<ClusterId>,
    pub highest: Vec<ClusterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub groups: GroupIds,
    pub probed_skills: usize,
    pub points: usize,
    /// Pearson r between inconsistency rate and slice accuracy.
    pub correlation: Option<f64>,
    pub deficiencies: BTreeMap<String, Vec<probing::Deficiency>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub instances: usize,
    pub benchmarks: Vec<String>,
    pub accuracy: BTreeMap<String, Option<f64>>,
    pub skills: Option<usize>,
    pub clusters: Option<usize>,
    pub slices: Option<usize>,
    pub mean_relevancy_rate: Option<f64>,
    pub mean_false_positive_rate: Option<f64>,
    pub routing_overall: Option<BTreeMap<String, Option<f64>>>,
    pub probe_correlation: Option<f64>,
    pub retrieval_precision: Option<BTreeMap<Method, Option<f64>>>,
}

pub fn mean_precision(rows: &[RetrievalReport]) -> BTreeMap<Method, Option<f64>> {
    let mut by: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let e = by.entry(r.method).or_default();
        if let Some(p) = r.precision {
            e.push(p);
        }
    }
    by.into_iter().map(|(m, v)| (m, stats::mean(&v))).collect()
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Skills => "skills",
        Method::QuestionEmbedding => "question",
        Method::Attributes => "attributes",
    }
}

pub fn render_retrieval(rows: &[RetrievalReport], methods: &[Method]) -> String {
    let mut header = vec!["query".to_string()];
    header.extend(methods.iter().map(|m| method_label(*m).to_string()));
    let mut queries: Vec<&str> = Vec::new();
    for r in rows {
        if !queries.contains(&r.query.as_str()) {
            queries.push(&r.query);
        }
    }
    let cell = |q: &str, m: Method| {
        rows.iter()
            .find(|r| r.query == q && r.method == m)
            .map(|r| slicing::pct(r.precision))
            .unwrap_or_else(|| "-".into())
    };
    let mut body: Vec<Vec<String>> = queries
        .iter()
        .map(|q| std::iter::once(q.to_string()).chain(methods.iter().map(|m| cell(q, *m))).collect())
        .collect();
    let means = mean_precision(rows);
    body.push(
        std::iter::once("mean".to_string())
            .chain(methods.iter().map(|m| slicing::pct(means.get(m).copied().flatten())))
            .collect(),
    );
    format!("precision@k (%)\n{}", slicing::aligned_table(&header, &body))
}

/// Relative path -> SHA-256 of every file under `root`, skipping `exclude`.
pub fn checksum_manifest(root: &Path, exclude: &[&Path]) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        if exclude.iter().any(|x| *x == f) {
            continue;
        }
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let rel = f.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
        out.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}
