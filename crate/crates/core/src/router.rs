//! Per-instance model selection from skill-slice accuracies.
//!
//! Each instance is routed using slice statistics with its own
//! contribution removed, so its answer never influences its own route.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{skill_key, Corpus};
use crate::skillspace::SkillIndex;
use crate::slicing::{aligned_table, pct, SliceAccuracyTable};
use crate::stats;
use crate::ClusterId;

pub const DECISIONS_FILE: &str = "routing_decisions.jsonl";
pub const REPORT_FILE: &str = "routing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub instance_id: String,
    pub chosen_model: String,
    /// Only models with a defined score appear.
    pub scores: BTreeMap<String, f64>,
    pub used_skills: Vec<ClusterId>,
    pub fallback: bool,
}

/// Inverse-size-weighted mean of `model`'s accuracy over the given
/// clusters, counting only slices of at least `min_size` instances that
/// the model has answers in. Repeated clusters count once.
pub fn instance_score(clusters: &[ClusterId], table: &SliceAccuracyTable, model: &str, min_size: usize) -> Option<f64> {
    let uniq: BTreeSet<ClusterId> = clusters.iter().copied().collect();
    let parts: Vec<(f64, f64)> = uniq
        .into_iter()
        .filter_map(|c| {
            let size = table.meta(c)?.size;
            if size < min_size || size == 0 {
                return None;
            }
            Some((1.0 / size as f64, table.accuracy(model, c)?))
        })
        .collect();
    weighted(&parts)
}

fn weighted(parts: &[(f64, f64)]) -> Option<f64> {
    let wsum: f64 = parts.iter().map(|p| p.0).sum();
    (wsum > 0.0).then(|| parts.iter().map(|(w, a)| w * a).sum::<f64>() / wsum)
}

/// Expected accuracy of picking a model uniformly at random.
pub fn random_choice_accuracy(accuracies: &[f64]) -> Option<f64> {
    stats::mean(accuracies)
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    correct: usize,
    support: usize,
}

/// Precomputed slice sums over the whole corpus, from which any single
/// instance can be removed in O(1) per slice.
pub struct Router {
    models: Vec<String>,
    default_model: String,
    min_size: usize,
    sizes: HashMap<ClusterId, usize>,
    members: HashMap<ClusterId, BTreeSet<String>>,
    counts: HashMap<(usize, ClusterId), Counts>,
    global: Vec<Counts>,
    instance_clusters: BTreeMap<String, Vec<ClusterId>>,
    correctness: Vec<HashMap<String, bool>>,
}

impl Router {
    pub fn new(corpus: &Corpus, index: &SkillIndex, models: &[String], default_model: &str, min_size: usize) -> Result<Self> {
        if !models.iter().any(|m| m == default_model) {
            return Err(Error::Config(format!("default model {default_model:?} is not among {models:?}")));
        }
        let lookup = index.lookup();
        let instance_clusters: BTreeMap<String, Vec<ClusterId>> = corpus
            .instances()
            .iter()
            .map(|inst| {
                let set: BTreeSet<ClusterId> = corpus
                    .instance_skills(&inst.id)
                    .iter()
                    .filter_map(|s| lookup.get(&skill_key(s)).copied())
                    .collect();
                (inst.id.clone(), set.into_iter().collect())
            })
            .collect();
        let correctness: Vec<HashMap<String, bool>> = models
            .iter()
            .map(|m| corpus.correctness(m).into_iter().map(|(k, v)| (k.to_string(), v)).collect())
            .collect();
        let mut counts: HashMap<(usize, ClusterId), Counts> = HashMap::new();
        let mut global = vec![Counts::default(); models.len()];
        for c in &index.clusters {
            for (mi, corr) in correctness.iter().enumerate() {
                let e = counts.entry((mi, c.cluster_id)).or_default();
                for id in &c.instance_ids {
                    if let Some(&ok) = corr.get(id) {
                        e.support += 1;
                        e.correct += ok as usize;
                    }
                }
            }
        }
        for (mi, corr) in correctness.iter().enumerate() {
            global[mi].support = corr.len();
            global[mi].correct = corr.values().filter(|&&v| v).count();
        }
        Ok(Self {
            models: models.to_vec(),
            default_model: default_model.to_string(),
            min_size,
            sizes: index.clusters.iter().map(|c| (c.cluster_id, c.instance_ids.len())).collect(),
            members: index.clusters.iter().map(|c| (c.cluster_id, c.instance_ids.clone())).collect(),
            counts,
            global,
            instance_clusters,
            correctness,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn clusters_of(&self, instance_id: &str) -> &[ClusterId] {
        self.instance_clusters.get(instance_id).map_or(&[], Vec::as_slice)
    }

    fn own(&self, mi: usize, id: &str) -> Option<bool> {
        self.correctness[mi].get(id).copied()
    }

    /// Score of model `mi` for `id` with `id` itself left out, plus the
    /// clusters that contributed.
    fn loo_score(&self, mi: usize, id: &str) -> (Option<f64>, Vec<ClusterId>) {
        let mut parts = Vec::new();
        let mut used = Vec::new();
        for &c in self.clusters_of(id) {
            let inside = self.members[&c].contains(id);
            let size = self.sizes[&c] - inside as usize;
            if size < self.min_size || size == 0 {
                continue;
            }
            let mut n = self.counts.get(&(mi, c)).copied().unwrap_or_default();
            if inside {
                if let Some(ok) = self.own(mi, id) {
                    n.support -= 1;
                    n.correct -= ok as usize;
                }
            }
            if n.support == 0 {
                continue;
            }
            parts.push((1.0 / size as f64, n.correct as f64 / n.support as f64));
            used.push(c);
        }
        (weighted(&parts), used)
    }

    fn loo_global(&self, mi: usize, id: &str) -> f64 {
        let mut g = self.global[mi];
        if let Some(ok) = self.own(mi, id) {
            g.support -= 1;
            g.correct -= ok as usize;
        }
        if g.support == 0 {
            0.0
        } else {
            g.correct as f64 / g.support as f64
        }
    }

    /// Highest score wins; ties go to the higher leave-one-out corpus
    /// accuracy, then to the smaller model name. Without any score the
    /// default model is chosen.
    pub fn route(&self, instance_id: &str) -> RoutingDecision {
        let mut scores = BTreeMap::new();
        let mut used: BTreeSet<ClusterId> = BTreeSet::new();
        let mut best: Option<(f64, f64, &str)> = None;
        for (mi, m) in self.models.iter().enumerate() {
            let (score, clusters) = self.loo_score(mi, instance_id);
            let Some(s) = score else { continue };
            scores.insert(m.clone(), s);
            used.extend(clusters);
            let g = self.loo_global(mi, instance_id);
            let better = match best {
                None => true,
                Some((bs, bg, bm)) => {
                    s > bs || (s == bs && (g > bg || (g == bg && m.as_str() < bm)))
                }
            };
            if better {
                best = Some((s, g, m));
            }
        }
        match best {
            Some((_, _, m)) => RoutingDecision {
                instance_id: instance_id.to_string(),
                chosen_model: m.to_string(),
                scores,
                used_skills: used.into_iter().collect(),
                fallback: false,
            },
            None => RoutingDecision {
                instance_id: instance_id.to_string(),
                chosen_model: self.default_model.clone(),
                scores,
                used_skills: Vec::new(),
                fallback: true,
            },
        }
    }

    /// Decisions for every corpus instance, in id order.
    pub fn route_all(&self) -> Vec<RoutingDecision> {
        let ids: Vec<&String> = self.instance_clusters.keys().collect();
        ids.par_iter().map(|id| self.route(id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub label: String,
    pub per_benchmark: BTreeMap<String, Option<f64>>,
    pub overall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingEvaluation {
    pub benchmarks: Vec<String>,
    pub instances: usize,
    pub excluded: Vec<String>,
    pub fallbacks: usize,
    pub rows: Vec<EvaluationRow>,
}

pub const RANDOM_ROW: &str = "random choice";
pub const ROUTED_ROW: &str = "routing";

/// Accuracy per benchmark for every model, random choice and routing.
/// Instances lacking an answer from any model are excluded.
pub fn evaluate_routing(corpus: &Corpus, models: &[String], decisions: &[RoutingDecision]) -> RoutingEvaluation {
    let by_id: HashMap<&str, &RoutingDecision> = decisions.iter().map(|d| (d.instance_id.as_str(), d)).collect();
    let mut excluded = Vec::new();
    // benchmark -> per-model correct counts, routed correct, total
    let mut tallies: BTreeMap<String, (Vec<usize>, usize, usize)> = BTreeMap::new();
    let mut fallbacks = 0;
    for inst in corpus.instances() {
        let answers: Option<Vec<bool>> = models.iter().map(|m| corpus.answer(m, &inst.id).map(|a| a.correct)).collect();
        let (Some(answers), Some(d)) = (answers, by_id.get(inst.id.as_str())) else {
            excluded.push(inst.id.clone());
            continue;
        };
        let Some(ci) = models.iter().position(|m| *m == d.chosen_model) else {
            excluded.push(inst.id.clone());
            continue;
        };
        fallbacks += d.fallback as usize;
        let t = tallies
            .entry(inst.benchmark.clone())
            .or_insert_with(|| (vec![0; models.len()], 0, 0));
        for (k, ok) in answers.iter().enumerate() {
            t.0[k] += *ok as usize;
        }
        t.1 += answers[ci] as usize;
        t.2 += 1;
    }
    if !excluded.is_empty() {
        log::warn!("routing evaluation excluded {} instances lacking answers or decisions", excluded.len());
    }
    let total: usize = tallies.values().map(|t| t.2).sum();
    let ratio = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);

    let mut rows = Vec::new();
    for (k, m) in models.iter().enumerate() {
        rows.push(EvaluationRow {
            label: m.clone(),
            per_benchmark: tallies.iter().map(|(b, t)| (b.clone(), ratio(t.0[k], t.2))).collect(),
            overall: ratio(tallies.values().map(|t| t.0[k]).sum(), total),
        });
    }
    let random = |accs: Vec<Option<f64>>| -> Option<f64> {
        let v: Option<Vec<f64>> = accs.into_iter().collect();
        random_choice_accuracy(&v?)
    };
    rows.push(EvaluationRow {
        label: RANDOM_ROW.into(),
        per_benchmark: tallies
            .keys()
            .map(|b| (b.clone(), random(rows[..models.len()].iter().map(|r| r.per_benchmark[b]).collect())))
            .collect(),
        overall: random(rows[..models.len()].iter().map(|r| r.overall).collect()),
    });
    rows.push(EvaluationRow {
        label: ROUTED_ROW.into(),
        per_benchmark: tallies.iter().map(|(b, t)| (b.clone(), ratio(t.1, t.2))).collect(),
        overall: ratio(tallies.values().map(|t| t.1).sum(), total),
    });
    RoutingEvaluation {
        benchmarks: tallies.keys().cloned().collect(),
        instances: total,
        excluded,
        fallbacks,
        rows,
    }
}

impl RoutingEvaluation {
    pub fn row(&self, label: &str) -> Option<&EvaluationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.benchmarks.iter().cloned());
        header.push("overall".into());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.label.clone()];
                cells.extend(self.benchmarks.iter().map(|b| pct(r.per_benchmark[b])));
                cells.push(pct(r.overall));
                cells
            })
            .collect();
        format!(
            "{}{} instances, {} routed to the default model, {} excluded\n",
            aligned_table(&header, &rows),
            self.instances,
            self.fallbacks,
            self.excluded.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EvaluationInstance, ModelAnswer, SkillMention};
    use crate::skillspace::SkillCluster;
    use crate::slicing::{SliceAccuracy, SliceMeta, TableRow};
    use proptest::prelude::*;

    fn table(slices: &[(u32, usize)], cells: &[(&str, u32, f64)]) -> SliceAccuracyTable {
        let mut rows: Vec<TableRow> = cells
            .iter()
            .map(|&(m, c, a)| TableRow {
                model: m.into(),
                cluster_id: c,
                cell: SliceAccuracy {
                    accuracy: a,
                    support: 10,
                    correct: 0,
                },
            })
            .collect();
        rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.cluster_id.cmp(&b.cluster_id)));
        SliceAccuracyTable {
            slices: slices
                .iter()
                .map(|&(c, size)| SliceMeta {
                    cluster_id: c,
                    name: format!("s{c}"),
                    size,
                })
                .collect(),
            rows,
        }
    }

    #[test]
    fn hand_weighted_example() {
        let t = table(&[(1, 100), (2, 200)], &[("A", 1, 0.9), ("A", 2, 0.4)]);
        let s = instance_score(&[1, 2], &t, "A", 100).unwrap();
        let hand = (0.9 / 100.0 + 0.4 / 200.0) / (1.0 / 100.0 + 1.0 / 200.0);
        assert!((s - hand).abs() < 1e-12);
        assert!((s - 0.733_333_333_3).abs() < 1e-9);
        assert_eq!(instance_score(&[2, 2], &t, "A", 100), Some(0.4));
        assert_eq!(instance_score(&[1, 2], &t, "A", 150), Some(0.4));
        assert_eq!(instance_score(&[], &t, "A", 100), None);
        assert_eq!(instance_score(&[1, 2], &t, "A", 1000), None);
    }

    #[test]
    fn random_choice_rows() {
        assert!((random_choice_accuracy(&[59.47, 58.49, 56.09]).unwrap() - 58.02).abs() < 0.005);
        assert!((random_choice_accuracy(&[84.18, 84.50, 87.46]).unwrap() - 85.38).abs() < 0.005);
    }

    /// Small corpus: `n` instances per skill cluster, each instance in one
    /// cluster. `acc[model][cluster]` is the fraction answered correctly.
    fn small(n: usize, acc: &[(&str, [bool; 2])]) -> (Corpus, SkillIndex) {
        let mut instances = Vec::new();
        let mut clusters = vec![BTreeSet::new(), BTreeSet::new()];
        for c in 0..2 {
            for i in 0..n {
                let inst = EvaluationInstance::text("b", &format!("{c}-{i:03}"), "q", "a");
                clusters[c].insert(inst.id.clone());
                instances.push(inst);
            }
        }
        let mut corpus = Corpus::new(instances).unwrap();
        for c in 0..2 {
            for id in clusters[c].clone() {
                corpus
                    .set_annotations(&id, vec![SkillMention::new(&id, 1, "K", [format!("skill{c}")])])
                    .unwrap();
            }
        }
        for (m, per) in acc {
            let answers: Vec<ModelAnswer> = corpus
                .instances()
                .iter()
                .map(|inst| ModelAnswer {
                    instance_id: inst.id.clone(),
                    model: m.to_string(),
                    raw_response: String::new(),
                    extracted_answer: String::new(),
                    correct: per[if inst.id.starts_with("b/0") { 0 } else { 1 }],
                })
                .collect();
            corpus.add_answers(answers).unwrap();
        }
        let index = SkillIndex {
            threshold: 0.95,
            embedder_id: "t".into(),
            clusters: (0..2)
                .map(|c| SkillCluster {
                    cluster_id: c as u32,
                    name: format!("skill{c}"),
                    members: vec![format!("skill{c}")],
                    instance_ids: clusters[c].clone(),
                })
                .collect(),
        };
        (corpus, index)
    }

    #[test]
    fn routes_to_the_stronger_model_per_skill() {
        let (c, idx) = small(5, &[("A", [true, false]), ("B", [false, true])]);
        let models = vec!["A".to_string(), "B".to_string()];
        let r = Router::new(&c, &idx, &models, "B", 3).unwrap();
        assert_eq!(r.route("b/0-000").chosen_model, "A");
        assert_eq!(r.route("b/1-000").chosen_model, "B");
        let eval = evaluate_routing(&c, &models, &r.route_all());
        assert_eq!(eval.row(ROUTED_ROW).unwrap().overall, Some(1.0));
        assert_eq!(eval.row(RANDOM_ROW).unwrap().overall, Some(0.5));
    }

    #[test]
    fn falls_back_without_eligible_slices() {
        let (c, idx) = small(5, &[("A", [true, true]), ("B", [false, false])]);
        let models = vec!["A".to_string(), "B".to_string()];
        // LOO sizes are 4, below the minimum of 5.
        let r = Router::new(&c, &idx, &models, "B", 5).unwrap();
        let d = r.route("b/0-000");
        assert!(d.fallback);
        assert_eq!(d.chosen_model, "B");
        assert!(d.used_skills.is_empty());
        assert!(Router::new(&c, &idx, &models, "C", 5).is_err());
    }

    #[test]
    fn ties_prefer_globally_stronger_then_name() {
        // Both perfect on skill 0; A also perfect on skill 1 so globally stronger.
        let (c, idx) = small(4, &[("B", [true, false]), ("A", [true, true])]);
        let models = vec!["B".to_string(), "A".to_string()];
        let r = Router::new(&c, &idx, &models, "B", 2).unwrap();
        let d = r.route("b/0-001");
        assert_eq!(d.scores["A"], d.scores["B"]);
        assert_eq!(d.chosen_model, "A");
        let (c, idx) = small(4, &[("B", [true, true]), ("A", [true, true])]);
        let r = Router::new(&c, &idx, &models, "B", 2).unwrap();
        assert_eq!(r.route("b/0-001").chosen_model, "A");
    }

    #[test]
    fn loo_matches_rebuilt_table() {
        // Mixed correctness so leaving one out changes the accuracies.
        let (mut c, idx) = small(6, &[("A", [true, false]), ("B", [false, true])]);
        let flips: Vec<ModelAnswer> = ["b/0-002", "b/1-004"]
            .iter()
            .map(|id| {
                let mut a = c.answer("A", id).unwrap().clone();
                a.correct = !a.correct;
                a
            })
            .collect();
        c.add_answers(flips).unwrap();
        let models = vec!["A".to_string(), "B".to_string()];
        let r = Router::new(&c, &idx, &models, "A", 1).unwrap();
        for inst in c.instances() {
            let slices = crate::slicing::build_slices(&idx, 0);
            let loo = SliceAccuracyTable::build_filtered(&c, &slices, &models, |id| id != inst.id);
            let mut shrunk = loo.clone();
            for s in &mut shrunk.slices {
                let orig = idx.cluster(s.cluster_id).unwrap();
                s.size = orig.instance_ids.len() - orig.instance_ids.contains(&inst.id) as usize;
            }
            let d = r.route(&inst.id);
            for m in &models {
                let oracle = instance_score(r.clusters_of(&inst.id), &shrunk, m, 1);
                assert_eq!(d.scores.get(m).copied(), oracle, "{} {m}", inst.id);
            }
        }
    }

    proptest! {
        #[test]
        fn scores_are_bounded(accs in prop::collection::vec(0.0f64..=1.0, 1..6), sizes in prop::collection::vec(1usize..500, 6)) {
            let slices: Vec<(u32, usize)> = sizes.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
            let cells: Vec<(&str, u32, f64)> = accs.iter().enumerate().map(|(i, &a)| ("m", i as u32, a)).collect();
            let t = table(&slices, &cells);
            let ids: Vec<u32> = (0..accs.len() as u32).collect();
            if let Some(s) = instance_score(&ids, &t, "m", 1) {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
            }
        }
    }
}
