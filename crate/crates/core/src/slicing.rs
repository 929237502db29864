//! Skill-slices and the per-model accuracy analyses built on them.
//!
//! Slices overlap: one instance sits in every slice whose cluster matches
//! any of its skills, so slice accuracies are not independent samples.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::Corpus;
use crate::skillspace::SkillIndex;
use crate::stats;
use crate::ClusterId;

pub const SLICES_FILE: &str = "slices.json";
pub const SLICE_ACCURACIES_FILE: &str = "slice_accuracies.json";
pub const OVERLAP_NOTE: &str = "note: slices overlap; slice accuracies are not independent";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillSlice {
    pub cluster_id: ClusterId,
    pub name: String,
    pub size: usize,
    pub instance_ids: BTreeSet<String>,
}

/// One slice per cluster with at least `min_size` instances, largest
/// first, ties by cluster id.
pub fn build_slices(index: &SkillIndex, min_size: usize) -> Vec<SkillSlice> {
    let mut slices: Vec<SkillSlice> = index
        .clusters
        .iter()
        .filter(|c| c.instance_ids.len() >= min_size)
        .map(|c| SkillSlice {
            cluster_id: c.cluster_id,
            name: c.name.clone(),
            size: c.instance_ids.len(),
            instance_ids: c.instance_ids.clone(),
        })
        .collect();
    slices.sort_by(|a, b| b.size.cmp(&a.size).then(a.cluster_id.cmp(&b.cluster_id)));
    slices
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceAccuracy {
    pub accuracy: f64,
    pub support: usize,
    pub correct: usize,
}

/// Accuracy over the slice's instances that `correctness` covers; `None`
/// when none are covered.
pub fn slice_accuracy(slice: &SkillSlice, correctness: &HashMap<&str, bool>) -> Option<SliceAccuracy> {
    let (mut correct, mut support) = (0, 0);
    for id in &slice.instance_ids {
        if let Some(&c) = correctness.get(id.as_str()) {
            support += 1;
            correct += c as usize;
        }
    }
    (support > 0).then(|| SliceAccuracy {
        accuracy: correct as f64 / support as f64,
        support,
        correct,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub cluster_id: ClusterId,
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub cluster_id: ClusterId,
    #[serde(flatten)]
    pub cell: SliceAccuracy,
}

/// Accuracy per (model, slice). Cells with zero support are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAccuracyTable {
    pub slices: Vec<SliceMeta>,
    /// Sorted by (model, cluster id).
    pub rows: Vec<TableRow>,
}

impl SliceAccuracyTable {
    pub fn build(corpus: &Corpus, slices: &[SkillSlice], models: &[String]) -> Self {
        Self::build_filtered(corpus, slices, models, |_| true)
    }

    /// Like [`build`](Self::build), counting only instances accepted by `keep`.
    pub fn build_filtered(
        corpus: &Corpus,
        slices: &[SkillSlice],
        models: &[String],
        keep: impl Fn(&str) -> bool + Sync,
    ) -> Self {
        let mut rows: Vec<TableRow> = models
            .iter()
            .flat_map(|model| {
                let correctness: HashMap<&str, bool> =
                    corpus.correctness(model).into_iter().filter(|(id, _)| keep(id)).collect();
                slices
                    .par_iter()
                    .filter_map(|s| {
                        slice_accuracy(s, &correctness).map(|cell| TableRow {
                            model: model.clone(),
                            cluster_id: s.cluster_id,
                            cell,
                        })
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.cluster_id.cmp(&b.cluster_id)));
        rows.dedup_by(|a, b| a.model == b.model && a.cluster_id == b.cluster_id);
        Self {
            slices: slices
                .iter()
                .map(|s| SliceMeta {
                    cluster_id: s.cluster_id,
                    name: s.name.clone(),
                    size: s.size,
                })
                .collect(),
            rows,
        }
    }

    pub fn get(&self, model: &str, cluster_id: ClusterId) -> Option<&SliceAccuracy> {
        self.rows
            .binary_search_by(|r| r.model.as_str().cmp(model).then(r.cluster_id.cmp(&cluster_id)))
            .ok()
            .map(|i| &self.rows[i].cell)
    }

    pub fn accuracy(&self, model: &str, cluster_id: ClusterId) -> Option<f64> {
        self.get(model, cluster_id).map(|c| c.accuracy)
    }

    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.model.clone()).collect();
        m.dedup();
        m
    }

    pub fn meta(&self, cluster_id: ClusterId) -> Option<&SliceMeta> {
        self.slices.iter().find(|s| s.cluster_id == cluster_id)
    }

    /// Mean accuracy over `models` for a slice; `None` unless every model
    /// has a cell.
    pub fn mean_accuracy(&self, models: &[String], cluster_id: ClusterId) -> Option<f64> {
        let accs: Option<Vec<f64>> = models.iter().map(|m| self.accuracy(m, cluster_id)).collect();
        stats::mean(&accs?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDelta {
    pub cluster_id: ClusterId,
    pub name: String,
    pub delta: f64,
}

fn sort_desc(deltas: &mut [SliceDelta]) {
    deltas.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.cluster_id.cmp(&b.cluster_id)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub model: String,
    pub others: Vec<String>,
    /// Highest delta first.
    pub deltas: Vec<SliceDelta>,
}

impl ModelComparison {
    pub fn strengths(&self, k: usize) -> &[SliceDelta] {
        &self.deltas[..k.min(self.deltas.len())]
    }

    /// Lowest delta first.
    pub fn weaknesses(&self, k: usize) -> Vec<SliceDelta> {
        self.deltas.iter().rev().take(k).cloned().collect()
    }
}

/// `acc(model) - mean(acc(others))` per slice where all of them have a
/// cell.
pub fn compare_models(table: &SliceAccuracyTable, model: &str, others: &[String]) -> ModelComparison {
    let mut deltas: Vec<SliceDelta> = table
        .slices
        .iter()
        .filter_map(|s| {
            let a = table.accuracy(model, s.cluster_id)?;
            let o = table.mean_accuracy(others, s.cluster_id)?;
            Some(SliceDelta {
                cluster_id: s.cluster_id,
                name: s.name.clone(),
                delta: a - o,
            })
        })
        .collect();
    sort_desc(&mut deltas);
    ModelComparison {
        model: model.to_string(),
        others: others.to_vec(),
        deltas,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub old_model: String,
    pub new_model: String,
    /// Accuracy change over instances both models answered.
    pub mean_delta: Option<f64>,
    pub instances: usize,
    pub top_gains: Vec<SliceDelta>,
    /// Slices that did not improve, worst first.
    pub zero_or_negative: Vec<SliceDelta>,
}

pub fn model_evolution_report(
    corpus: &Corpus,
    table: &SliceAccuracyTable,
    old_model: &str,
    new_model: &str,
    top_k: usize,
) -> EvolutionReport {
    let old = corpus.correctness(old_model);
    let new = corpus.correctness(new_model);
    let paired: Vec<f64> = old
        .iter()
        .filter_map(|(id, &o)| new.get(id).map(|&n| n as u8 as f64 - o as u8 as f64))
        .collect();
    let cmp = compare_models(table, new_model, &[old_model.to_string()]);
    let mut zero_or_negative: Vec<SliceDelta> = cmp.deltas.iter().filter(|d| d.delta <= 0.0).cloned().collect();
    zero_or_negative.reverse();
    EvolutionReport {
        old_model: old_model.to_string(),
        new_model: new_model.to_string(),
        mean_delta: stats::mean(&paired),
        instances: paired.len(),
        top_gains: cmp.strengths(top_k).to_vec(),
        zero_or_negative,
    }
}

/// Pearson r between the slice accuracies of `model` in two tables, over
/// slices present in both.
pub fn partition_correlation(a: &SliceAccuracyTable, b: &SliceAccuracyTable, model: &str) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .slices
        .iter()
        .filter_map(|s| Some((a.accuracy(model, s.cluster_id)?, b.accuracy(model, s.cluster_id)?)))
        .unzip();
    stats::pearson(&xs, &ys)
}

/// Seeded random halving of the corpus instance ids.
pub fn random_halves(corpus: &Corpus, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut ids: Vec<String> = corpus.instances().iter().map(|i| i.id.clone()).collect();
    ids.shuffle(&mut crate::rng::substream(seed, "partition", ""));
    let right = ids.split_off(ids.len() / 2);
    (ids.into_iter().collect(), right.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub support: usize,
}

pub fn benchmark_accuracies(corpus: &Corpus, model: &str) -> BTreeMap<String, BenchmarkAccuracy> {
    corpus
        .benchmark_counts(model)
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(b, (c, n))| {
            (
                b,
                BenchmarkAccuracy {
                    accuracy: c as f64 / n as f64,
                    correct: c,
                    support: n,
                },
            )
        })
        .collect()
}

/// Left-aligned first column, right-aligned rest, two-space gutters.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let fmt = |cells: &[String]| -> String {
        let mut line = String::new();
        for (i, c) in cells.iter().enumerate().take(cols) {
            if i > 0 {
                line.push_str("  ");
            }
            let pad = widths[i] - c.chars().count();
            if i == 0 {
                line.push_str(c);
                line.extend(std::iter::repeat_n(' ', pad));
            } else {
                line.extend(std::iter::repeat_n(' ', pad));
                line.push_str(c);
            }
        }
        line.trim_end().to_string()
    };
    let mut out = fmt(header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&fmt(r));
        out.push('\n');
    }
    out
}

pub fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Text rendering of the slice table, one column per model.
pub fn render_table(table: &SliceAccuracyTable) -> String {
    let models = table.models();
    let mut header = vec!["slice".to_string(), "size".to_string()];
    header.extend(models.iter().cloned());
    let rows: Vec<Vec<String>> = table
        .slices
        .iter()
        .map(|s| {
            let mut r = vec![s.name.clone(), s.size.to_string()];
            r.extend(models.iter().map(|m| pct(table.accuracy(m, s.cluster_id))));
            r
        })
        .collect();
    format!("{}{OVERLAP_NOTE}\n", aligned_table(&header, &rows))
}

pub fn render_comparison(c: &ModelComparison, k: usize) -> String {
    let header = ["slice".to_string(), "delta".to_string()];
    let rows = |ds: &[SliceDelta]| -> Vec<Vec<String>> {
        ds.iter()
            .map(|d| vec![d.name.clone(), format!("{:+.2}", 100.0 * d.delta)])
            .collect()
    };
    format!(
        "{} vs mean of [{}]\n\nstrengths\n{}\nweaknesses\n{}{OVERLAP_NOTE}\n",
        c.model,
        c.others.join(", "),
        aligned_table(&header, &rows(c.strengths(k))),
        aligned_table(&header, &rows(&c.weaknesses(k))),
    )
}

pub fn render_evolution(r: &EvolutionReport) -> String {
    let header = ["slice".to_string(), "delta".to_string()];
    let rows = |ds: &[SliceDelta]| -> Vec<Vec<String>> {
        ds.iter()
            .map(|d| vec![d.name.clone(), format!("{:+.2}", 100.0 * d.delta)])
            .collect()
    };
    format!(
        "{} -> {}: mean change {} points over {} instances\n\ntop gains\n{}\nno improvement\n{}{OVERLAP_NOTE}\n",
        r.old_model,
        r.new_model,
        r.mean_delta.map_or("-".into(), |d| format!("{:+.2}", 100.0 * d)),
        r.instances,
        aligned_table(&header, &rows(&r.top_gains)),
        aligned_table(&header, &rows(&r.zero_or_negative)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EvaluationInstance, ModelAnswer};
    use crate::skillspace::SkillCluster;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cluster(id: u32, ids: impl IntoIterator<Item = usize>) -> SkillCluster {
        SkillCluster {
            cluster_id: id,
            name: format!("skill{id}"),
            members: vec![format!("skill{id}")],
            instance_ids: ids.into_iter().map(|i| format!("b/{i:04}")).collect(),
        }
    }

    fn index(clusters: Vec<SkillCluster>) -> SkillIndex {
        SkillIndex {
            threshold: 0.95,
            embedder_id: "t".into(),
            clusters,
        }
    }

    fn corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| EvaluationInstance::text(if i % 2 == 0 { "even" } else { "odd" }, &format!("{i:04}"), "q", "a"))
                .collect(),
        )
        .unwrap()
    }

    fn answer(model: &str, i: usize, correct: bool) -> ModelAnswer {
        ModelAnswer {
            instance_id: format!("b/{i:04}"),
            model: model.into(),
            raw_response: String::new(),
            extracted_answer: String::new(),
            correct,
        }
    }

    fn bench_corpus(n: usize) -> Corpus {
        Corpus::new((0..n).map(|i| EvaluationInstance::text("b", &format!("{i:04}"), "q", "a")).collect()).unwrap()
    }

    #[test]
    fn min_size_boundary() {
        let idx = index(vec![cluster(0, 0..150), cluster(1, 0..99)]);
        assert_eq!(build_slices(&idx, 100).len(), 1);
        assert_eq!(build_slices(&idx, 0).len(), 2);
        assert_eq!(build_slices(&idx, 99).len(), 2);
    }

    #[test]
    fn slices_match_filter_oracle() {
        let idx = index(vec![cluster(0, 0..30), cluster(1, 10..50), cluster(2, 0..5)]);
        for min in [0, 5, 6, 30, 40, 41] {
            let got: Vec<u32> = build_slices(&idx, min).iter().map(|s| s.cluster_id).collect();
            let mut want: Vec<(usize, u32)> = idx
                .clusters
                .iter()
                .filter(|c| c.instance_ids.len() >= min)
                .map(|c| (c.instance_ids.len(), c.cluster_id))
                .collect();
            want.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            assert_eq!(got, want.into_iter().map(|w| w.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn slice_accuracy_examples() {
        let s = &build_slices(&index(vec![cluster(0, 0..4)]), 0)[0];
        let c: HashMap<&str, bool> = [("b/0000", true), ("b/0001", true), ("b/0002", true), ("b/0003", false)].into();
        let a = slice_accuracy(s, &c).unwrap();
        assert_eq!((a.accuracy, a.support), (0.75, 4));
        let all: HashMap<&str, bool> = [("b/0000", true), ("b/0001", true)].into();
        let a = slice_accuracy(s, &all).unwrap();
        assert_eq!((a.accuracy, a.support), (1.0, 2));
        assert_eq!(slice_accuracy(s, &HashMap::new()), None);
    }

    #[test]
    fn table_matches_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = bench_corpus(200);
        let models = vec!["m1".to_string(), "m2".to_string()];
        for m in &models {
            let answered: Vec<usize> = (0..200).filter(|_| rng.random_bool(0.9)).collect();
            let answers: Vec<ModelAnswer> = answered.into_iter().map(|i| answer(m, i, rng.random_bool(0.6))).collect();
            c.add_answers(answers).unwrap();
        }
        let idx = index(vec![cluster(0, 0..120), cluster(1, 50..200), cluster(2, (0..200).step_by(3))]);
        let slices = build_slices(&idx, 0);
        let table = SliceAccuracyTable::build(&c, &slices, &models);
        for m in &models {
            for s in &slices {
                let answered: Vec<&ModelAnswer> = c.answers[m]
                    .iter()
                    .filter(|a| s.instance_ids.contains(&a.instance_id))
                    .collect();
                let correct = answered.iter().filter(|a| a.correct).count();
                let cell = table.get(m, s.cluster_id).unwrap();
                assert_eq!(cell.support, answered.len());
                assert_eq!(cell.correct, correct);
                assert!(cell.support <= s.size);
            }
        }
    }

    fn synthetic_table(accs: &[(&str, &[f64])]) -> SliceAccuracyTable {
        let n = accs[0].1.len();
        let mut rows = Vec::new();
        for (m, a) in accs {
            for (i, &acc) in a.iter().enumerate() {
                rows.push(TableRow {
                    model: m.to_string(),
                    cluster_id: i as u32,
                    cell: SliceAccuracy {
                        accuracy: acc,
                        support: 10,
                        correct: (acc * 10.0).round() as usize,
                    },
                });
            }
        }
        rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.cluster_id.cmp(&b.cluster_id)));
        SliceAccuracyTable {
            slices: (0..n)
                .map(|i| SliceMeta {
                    cluster_id: i as u32,
                    name: format!("s{i}"),
                    size: 10,
                })
                .collect(),
            rows,
        }
    }

    #[test]
    fn compare_examples() {
        let t = synthetic_table(&[("a", &[0.9]), ("b", &[0.7]), ("c", &[0.7])]);
        let cmp = compare_models(&t, "a", &["b".into(), "c".into()]);
        assert!((cmp.deltas[0].delta - 0.2).abs() < 1e-12);
        let eq = synthetic_table(&[("a", &[0.5, 0.6]), ("b", &[0.5, 0.6])]);
        assert!(compare_models(&eq, "a", &["b".into()]).deltas.iter().all(|d| d.delta == 0.0));
    }

    #[test]
    fn compare_ordering_matches_sort_oracle() {
        let a = [0.9, 0.1, 0.5, 0.7, 0.3];
        let b = [0.2, 0.4, 0.5, 0.9, 0.1];
        let t = synthetic_table(&[("a", &a), ("b", &b)]);
        let cmp = compare_models(&t, "a", &["b".into()]);
        let mut oracle: Vec<(f64, u32)> = (0..5).map(|i| (a[i] - b[i], i as u32)).collect();
        oracle.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        assert_eq!(cmp.deltas.iter().map(|d| d.cluster_id).collect::<Vec<_>>(), oracle.iter().map(|o| o.1).collect::<Vec<_>>());
        assert_eq!(cmp.strengths(2)[0].cluster_id, 0);
        assert_eq!(cmp.weaknesses(1)[0].cluster_id, 1);
        // Antisymmetry on two models.
        let rev = compare_models(&t, "b", &["a".into()]);
        for d in &cmp.deltas {
            let r = rev.deltas.iter().find(|x| x.cluster_id == d.cluster_id).unwrap();
            assert!((d.delta + r.delta).abs() < 1e-12);
        }
    }

    #[test]
    fn evolution_examples() {
        let mut c = bench_corpus(8);
        c.add_answers((0..8).map(|i| answer("old", i, i < 4))).unwrap();
        c.add_answers((0..8).map(|i| answer("same", i, i < 4))).unwrap();
        // Flip the slice {6,7} from 0 to 1.
        c.add_answers((0..8).map(|i| answer("new", i, i < 4 || i >= 6))).unwrap();
        let idx = index(vec![cluster(0, 0..4), cluster(1, 4..6), cluster(2, 6..8), cluster(3, [0, 4, 6, 7])]);
        let slices = build_slices(&idx, 0);
        let models: Vec<String> = ["new", "old", "same"].map(String::from).to_vec();
        let t = SliceAccuracyTable::build(&c, &slices, &models);

        let same = model_evolution_report(&c, &t, "old", "same", 3);
        assert_eq!(same.mean_delta, Some(0.0));
        assert!(same.top_gains.iter().all(|d| d.delta == 0.0));

        let r = model_evolution_report(&c, &t, "old", "new", 2);
        assert_eq!(r.top_gains[0].cluster_id, 2);
        assert!((r.top_gains[0].delta - 1.0).abs() < 1e-12);
        // Hand computation: per instance 2 of 8 flip, slice 3 gains 2/4.
        assert!((r.mean_delta.unwrap() - 0.25).abs() < 1e-12);
        assert!((r.top_gains[1].delta - 0.5).abs() < 1e-12);
        let zn: BTreeSet<u32> = r.zero_or_negative.iter().map(|d| d.cluster_id).collect();
        assert_eq!(zn, BTreeSet::from([0, 1]));
        assert!(render_evolution(&r).contains(OVERLAP_NOTE));
    }

    #[test]
    fn correlation_examples() {
        let t = synthetic_table(&[("m", &[0.1, 0.5, 0.9, 0.4])]);
        assert!((partition_correlation(&t, &t, "m").unwrap() - 1.0).abs() < 1e-12);
        let a = synthetic_table(&[("m", &[0.0, 0.5, 1.0])]);
        let b = synthetic_table(&[("m", &[1.0, 0.5, 0.0])]);
        assert!((partition_correlation(&a, &b, "m").unwrap() + 1.0).abs() < 1e-12);
        let short = synthetic_table(&[("m", &[0.0, 1.0])]);
        assert_eq!(partition_correlation(&short, &short, "m"), None);
    }

    #[test]
    fn halves_are_disjoint_and_seeded() {
        let c = corpus(11);
        let (a, b) = random_halves(&c, 9);
        assert_eq!(a.len() + b.len(), 11);
        assert!(a.is_disjoint(&b));
        assert_eq!(random_halves(&c, 9), (a, b));
    }

    #[test]
    fn text_rendering() {
        let t = synthetic_table(&[("a", &[0.5]), ("bb", &[1.0])]);
        let text = render_table(&t);
        assert!(text.starts_with("slice  size      a      bb\n"));
        assert!(text.contains("s0       10  50.00  100.00"), "{text}");
        assert!(text.contains(OVERLAP_NOTE));
    }

    proptest! {
        #[test]
        fn overall_is_support_weighted_benchmark_mean(bits in prop::collection::vec(any::<Option<bool>>(), 1..80)) {
            let mut c = corpus(bits.len());
            let answers: Vec<ModelAnswer> = bits
                .iter()
                .enumerate()
                .filter_map(|(i, b)| b.map(|ok| ModelAnswer {
                    instance_id: c.instances()[i].id.clone(),
                    model: "m".into(),
                    raw_response: String::new(),
                    extracted_answer: String::new(),
                    correct: ok,
                }))
                .collect();
            c.add_answers(answers).unwrap();
            let per = benchmark_accuracies(&c, "m");
            let total: usize = per.values().map(|b| b.support).sum();
            if total > 0 {
                let weighted: f64 = per.values().map(|b| b.accuracy * b.support as f64).sum::<f64>() / total as f64;
                prop_assert!((weighted - c.accuracy("m").unwrap()).abs() < 1e-12);
            }
            for b in per.values() {
                prop_assert!((0.0..=1.0).contains(&b.accuracy));
            }
        }
    }
}
