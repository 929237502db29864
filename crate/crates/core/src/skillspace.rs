//! Embedding-space operations over skill names: similarity, greedy
//! threshold clustering, the repeated de-duplication loop and centroid
//! naming.
//!
//! The greedy clustering only guarantees that every member is within the
//! threshold of its cluster's *center*; two members of one cluster may be
//! further apart than the threshold.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::gateway::{CachedEmbedder, EmbeddingVector, GatewayError};
use crate::jsonl;
use crate::model::{display_skill_name, skill_key};
use crate::scalar::Scalar;
use crate::ClusterId;

pub const INDEX_FILE: &str = "skill_index.json";

/// Default row-block size for similarity sweeps.
pub const DEFAULT_BLOCK_ROWS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkillspaceError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("histogram bins overlap: {0}")]
    OverlappingBins(String),
    #[error("no embedding for skill {0:?}")]
    MissingEmbedding(String),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("{0} keys for {1} vectors")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Embedding(#[from] GatewayError),
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `a·b / (|a||b|)`, clamped to [-1, 1].
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T, SkillspaceError> {
    if a.len() != b.len() {
        return Err(SkillspaceError::DimensionMismatch(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(SkillspaceError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).max(-T::one()).min(T::one()))
}

pub fn similarity<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T, SkillspaceError> {
    cosine_similarity(a.as_slice(), b.as_slice())
}

fn check_threshold(t: f64) -> Result<(), SkillspaceError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(SkillspaceError::InvalidThreshold(t))
    }
}

/// Skill name -> embedding, keyed case-insensitively.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    index: HashMap<String, usize>,
    names: Vec<String>,
    vectors: Vec<EmbeddingVector<T>>,
}

impl<T: Scalar> Default for EmbeddingTable<T> {
    fn default() -> Self {
        Self {
            index: HashMap::new(),
            names: Vec::new(),
            vectors: Vec::new(),
        }
    }
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, EmbeddingVector<T>)>) -> Self {
        let mut t = Self::default();
        for (name, v) in pairs {
            t.insert(name, v);
        }
        t
    }

    pub fn insert(&mut self, name: String, vector: EmbeddingVector<T>) {
        let key = skill_key(&name);
        match self.index.get(&key) {
            Some(&i) => self.vectors[i] = vector,
            None => {
                self.index.insert(key, self.names.len());
                self.names.push(display_skill_name(&name));
                self.vectors.push(vector);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(&skill_key(name))
    }

    pub fn get(&self, name: &str) -> Result<&EmbeddingVector<T>, SkillspaceError> {
        self.index
            .get(&skill_key(name))
            .map(|&i| &self.vectors[i])
            .ok_or_else(|| SkillspaceError::MissingEmbedding(name.to_string()))
    }

    pub fn similarity(&self, a: &str, b: &str) -> Result<T, SkillspaceError> {
        similarity(self.get(a)?, self.get(b)?)
    }

    /// Highest similarity between `name` and any of `others`; `None` when
    /// `others` is empty.
    pub fn max_similarity<S: AsRef<str>>(&self, name: &str, others: &[S]) -> Result<Option<T>, SkillspaceError> {
        let v = self.get(name)?;
        let mut best: Option<T> = None;
        for o in others {
            let s = similarity(v, self.get(o.as_ref())?)?;
            best = Some(best.map_or(s, |b| b.max(s)));
        }
        Ok(best)
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            index: self.index.clone(),
            names: self.names.clone(),
            vectors: self.vectors.iter().map(|v| v.cast()).collect(),
        }
    }
}

impl EmbeddingTable<f64> {
    /// Embeds every distinct name (by key) not yet in the table.
    pub fn extend_with(&mut self, names: impl IntoIterator<Item = String>, embedder: &CachedEmbedder) -> Result<(), SkillspaceError> {
        let mut seen = BTreeSet::new();
        let missing: Vec<String> = names
            .into_iter()
            .map(|n| display_skill_name(&n))
            .filter(|n| !n.is_empty() && !self.contains(n) && seen.insert(skill_key(n)))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let vectors = embedder.embed_texts(&missing)?;
        for (n, v) in missing.into_iter().zip(vectors) {
            self.insert(n, v);
        }
        Ok(())
    }

    pub fn embed(names: impl IntoIterator<Item = String>, embedder: &CachedEmbedder) -> Result<Self, SkillspaceError> {
        let mut t = Self::default();
        t.extend_with(names, embedder)?;
        Ok(t)
    }
}

/// For each vector, the indices (ascending, self included) whose
/// similarity is at least `threshold`. Rows are processed in parallel
/// blocks of `block_rows`; vectors are assumed unit-normalised.
pub fn neighbor_sets<T: Scalar>(
    vectors: &[EmbeddingVector<T>],
    threshold: T,
    block_rows: usize,
) -> Result<Vec<Vec<usize>>, SkillspaceError> {
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(SkillspaceError::DimensionMismatch(first.dim(), bad.dim()));
        }
    }
    let block_rows = block_rows.max(1);
    let blocks: Vec<Vec<Vec<usize>>> = (0..vectors.len())
        .collect::<Vec<_>>()
        .par_chunks(block_rows)
        .map(|rows| {
            rows.iter()
                .map(|&i| {
                    let a = vectors[i].as_slice();
                    (0..vectors.len())
                        .filter(|&j| j == i || dot(a, vectors[j].as_slice()) >= threshold)
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// A cluster as indices into the clustering input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCluster {
    pub center: usize,
    /// Ascending by key.
    pub members: Vec<usize>,
}

/// Greedy community detection.
///
/// 1. Every point's neighbour set is `{j : sim(i, j) >= threshold}`,
///    itself included.
/// 2. Points are ranked as candidate centers by neighbour count
///    (descending), ties by key (ascending).
/// 3. Each still-unassigned candidate in that order becomes a center and
///    claims all of its unassigned neighbours.
///
/// Every point ends up in exactly one cluster; singletons are allowed.
pub fn greedy_community_clustering<T: Scalar>(
    keys: &[String],
    vectors: &[EmbeddingVector<T>],
    threshold: T,
    block_rows: usize,
) -> Result<Vec<RawCluster>, SkillspaceError> {
    if keys.len() != vectors.len() {
        return Err(SkillspaceError::LengthMismatch(keys.len(), vectors.len()));
    }
    let neighbors = neighbor_sets(vectors, threshold, block_rows)?;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        neighbors[b]
            .len()
            .cmp(&neighbors[a].len())
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    let mut assigned = vec![false; keys.len()];
    let mut clusters = Vec::new();
    for c in order {
        if assigned[c] {
            continue;
        }
        let mut members: Vec<usize> = neighbors[c].iter().copied().filter(|&j| !assigned[j]).collect();
        for &m in &members {
            assigned[m] = true;
        }
        members.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
        clusters.push(RawCluster { center: c, members });
    }
    Ok(clusters)
}

/// The member whose embedding is closest to the members' mean embedding;
/// ties go to the lexicographically smaller name.
pub fn name_cluster<T: Scalar>(members: &[&str], vectors: &[&EmbeddingVector<T>]) -> String {
    assert!(!members.is_empty(), "cannot name an empty cluster");
    assert_eq!(members.len(), vectors.len());
    if members.len() == 1 {
        return members[0].to_string();
    }
    let dim = vectors[0].dim();
    let mut mean = vec![T::zero(); dim];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v.as_slice()) {
            *m = *m + x;
        }
    }
    let n = T::from_usize(members.len()).unwrap();
    mean.iter_mut().for_each(|m| *m = *m / n);

    let mut best: Option<(T, &str)> = None;
    for (name, v) in members.iter().zip(vectors) {
        let Ok(s) = cosine_similarity(v.as_slice(), &mean) else {
            continue;
        };
        best = match best {
            None => Some((s, name)),
            Some((bs, bn)) => {
                if s > bs + T::tie_tolerance() || ((s - bs).abs() <= T::tie_tolerance() && *name < bn) {
                    Some((s, name))
                } else {
                    Some((bs, bn))
                }
            }
        };
    }
    match best {
        Some((_, name)) => name.to_string(),
        // Zero mean (e.g. antipodal pair): fall back to the smallest name.
        None => members.iter().min().unwrap().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillCluster {
    pub cluster_id: ClusterId,
    pub name: String,
    pub members: Vec<String>,
    pub instance_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillIndex {
    pub threshold: f64,
    pub embedder_id: String,
    pub clusters: Vec<SkillCluster>,
}

impl SkillIndex {
    /// Skill key -> cluster id.
    pub fn lookup(&self) -> HashMap<String, ClusterId> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (skill_key(m), c.cluster_id)))
            .collect()
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&SkillCluster> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    pub fn skill_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    /// Checks the structural invariants: valid threshold, non-empty
    /// clusters named by a member, each skill in exactly one cluster.
    pub fn validate(&self) -> Result<(), String> {
        check_threshold(self.threshold).map_err(|e| e.to_string())?;
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for c in &self.clusters {
            if !ids.insert(c.cluster_id) {
                return Err(format!("duplicate cluster id {}", c.cluster_id));
            }
            if c.members.is_empty() {
                return Err(format!("cluster {} is empty", c.cluster_id));
            }
            if !c.members.contains(&c.name) {
                return Err(format!("cluster {} named {:?} outside its members", c.cluster_id, c.name));
            }
            for m in &c.members {
                if !seen.insert(skill_key(m)) {
                    return Err(format!("skill {m:?} appears in more than one cluster"));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        jsonl::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DedupParams {
    pub threshold: f64,
    /// Stop once at most this fraction of cluster names still has a
    /// neighbour at or above the threshold.
    pub residual: f64,
    pub max_iterations: usize,
    pub block_rows: usize,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            residual: 0.005,
            max_iterations: 5,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input_skills: usize,
    pub iterations: usize,
    /// Cluster count after each clustering pass.
    pub cluster_counts: Vec<usize>,
    /// Residual fraction measured after each pass.
    pub residual_fractions: Vec<f64>,
}

/// Fraction of names whose similarity to some *other* name reaches the
/// threshold.
pub fn residual_fraction<T: Scalar>(vectors: &[EmbeddingVector<T>], threshold: T, block_rows: usize) -> Result<f64, SkillspaceError> {
    if vectors.is_empty() {
        return Ok(0.0);
    }
    let neighbors = neighbor_sets(vectors, threshold, block_rows)?;
    Ok(neighbors.iter().filter(|n| n.len() > 1).count() as f64 / vectors.len() as f64)
}

/// Clusters `skills`, names clusters by centroid, then repeatedly
/// re-clusters the cluster *names* and merges the member sets of clusters
/// whose names fall together, until the residual fraction is small enough
/// or `max_iterations` passes have run. Instance sets of merged clusters are
/// unions.
///
/// `skill_instances` maps skill keys to the instances annotated with them.
pub fn dedup_loop<T: Scalar>(
    skills: &[String],
    embeddings: &EmbeddingTable<T>,
    skill_instances: &BTreeMap<String, BTreeSet<String>>,
    embedder_id: &str,
    params: DedupParams,
) -> Result<(SkillIndex, DedupReport), SkillspaceError> {
    check_threshold(params.threshold)?;
    let threshold = T::from_f64(params.threshold).unwrap();

    // One display form per key: the lexicographically smallest variant.
    let mut by_key: BTreeMap<String, String> = BTreeMap::new();
    for s in skills {
        let d = display_skill_name(s);
        if d.is_empty() {
            continue;
        }
        by_key
            .entry(skill_key(&d))
            .and_modify(|cur| {
                if d < *cur {
                    *cur = d.clone();
                }
            })
            .or_insert(d);
    }
    let keys: Vec<String> = by_key.keys().cloned().collect();
    let names: Vec<String> = by_key.into_values().collect();
    let vectors: Vec<EmbeddingVector<T>> = names
        .iter()
        .map(|n| embeddings.get(n).cloned())
        .collect::<Result<_, _>>()?;

    let mut report = DedupReport {
        input_skills: names.len(),
        iterations: 0,
        cluster_counts: Vec::new(),
        residual_fractions: Vec::new(),
    };

    let name_group = |members: &[usize]| -> usize {
        let ms: Vec<&str> = members.iter().map(|&i| names[i].as_str()).collect();
        let vs: Vec<&EmbeddingVector<T>> = members.iter().map(|&i| &vectors[i]).collect();
        let chosen = name_cluster(&ms, &vs);
        members
            .iter()
            .copied()
            .find(|&i| names[i] == chosen)
            .expect("name is a member")
    };

    // groups: (member skill indices, index of the naming skill)
    let mut groups: Vec<(Vec<usize>, usize)> = greedy_community_clustering(&keys, &vectors, threshold, params.block_rows)?
        .into_iter()
        .map(|c| {
            let n = name_group(&c.members);
            (c.members, n)
        })
        .collect();
    report.iterations = 1;
    report.cluster_counts.push(groups.len());

    loop {
        let name_vectors: Vec<EmbeddingVector<T>> = groups.iter().map(|(_, n)| vectors[*n].clone()).collect();
        let frac = residual_fraction(&name_vectors, threshold, params.block_rows)?;
        report.residual_fractions.push(frac);
        if frac <= params.residual || report.iterations >= params.max_iterations {
            break;
        }
        let name_keys: Vec<String> = groups.iter().map(|(_, n)| keys[*n].clone()).collect();
        let merged = greedy_community_clustering(&name_keys, &name_vectors, threshold, params.block_rows)?;
        groups = merged
            .into_iter()
            .map(|c| {
                let mut members: Vec<usize> = c.members.iter().flat_map(|&g| groups[g].0.iter().copied()).collect();
                members.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
                let n = name_group(&members);
                (members, n)
            })
            .collect();
        report.iterations += 1;
        report.cluster_counts.push(groups.len());
    }

    groups.sort_by(|a, b| keys[a.1].cmp(&keys[b.1]));
    let clusters = groups
        .into_iter()
        .enumerate()
        .map(|(id, (members, n))| SkillCluster {
            cluster_id: id as ClusterId,
            name: names[n].clone(),
            instance_ids: members
                .iter()
                .flat_map(|&i| skill_instances.get(&keys[i]).into_iter().flatten().cloned())
                .collect(),
            members: members.into_iter().map(|i| names[i].clone()).collect(),
        })
        .collect();
    Ok((
        SkillIndex {
            threshold: params.threshold,
            embedder_id: embedder_id.to_string(),
            clusters,
        },
        report,
    ))
}

/// Half-open `[lo, hi)` size bin; `hi = None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBin {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl SizeBin {
    pub const fn new(lo: usize, hi: Option<usize>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, n: usize) -> bool {
        n >= self.lo && self.hi.is_none_or(|h| n < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{})", self.lo, h),
            None => format!(">={}", self.lo),
        }
    }
}

/// Slice-size bins used for granularity comparisons.
pub const GRANULARITY_BINS: [SizeBin; 7] = [
    SizeBin::new(0, Some(10)),
    SizeBin::new(10, Some(25)),
    SizeBin::new(25, Some(50)),
    SizeBin::new(50, Some(100)),
    SizeBin::new(100, Some(250)),
    SizeBin::new(250, Some(1000)),
    SizeBin::new(1000, None),
];

/// Counts clusters by instance count into `bins`.
pub fn granularity_histogram(index: &SkillIndex, bins: &[SizeBin]) -> Result<Vec<usize>, SkillspaceError> {
    let mut sorted: Vec<&SizeBin> = bins.iter().collect();
    sorted.sort_by_key(|b| b.lo);
    for w in sorted.windows(2) {
        if w[0].hi.is_none_or(|h| h > w[1].lo) {
            return Err(SkillspaceError::OverlappingBins(format!("{} and {}", w[0].label(), w[1].label())));
        }
    }
    if let Some(b) = bins.iter().find(|b| b.hi.is_some_and(|h| h <= b.lo)) {
        return Err(SkillspaceError::OverlappingBins(format!("empty bin {}", b.label())));
    }
    Ok(bins
        .iter()
        .map(|b| {
            index
                .clusters
                .iter()
                .filter(|c| b.contains(c.instance_ids.len()))
                .count()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    fn keys(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap() - 0.70710678).abs() <= 1e-6);
        assert!((cosine_similarity(&[1.0f32, 1.0], &[1.0, 0.0]).unwrap() - 0.70710678).abs() <= 1e-6);
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0]),
            Err(SkillspaceError::DimensionMismatch(2, 1))
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(SkillspaceError::ZeroVector));
    }

    #[test]
    fn identical_pair_forms_one_cluster() {
        let vs = vec![unit(&[1.0, 2.0]), unit(&[1.0, 2.0])];
        let c = greedy_community_clustering(&keys(2), &vs, 0.95, 8).unwrap();
        assert_eq!(c, vec![RawCluster { center: 0, members: vec![0, 1] }]);
    }

    #[test]
    fn orthogonal_points_are_singletons() {
        let vs: Vec<_> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                unit(&v)
            })
            .collect();
        let c = greedy_community_clustering(&keys(4), &vs, 0.95, 3).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|c| c.members == vec![c.center]));
    }

    #[test]
    fn empty_input() {
        let c = greedy_community_clustering::<f64>(&[], &[], 0.95, 8).unwrap();
        assert!(c.is_empty());
    }

    /// All set partitions of `0..n`.
    fn partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
        let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
        for i in 0..n {
            let mut next = Vec::new();
            for p in &out {
                for b in 0..p.len() {
                    let mut q = p.clone();
                    q[b].push(i);
                    next.push(q);
                }
                let mut q = p.clone();
                q.push(vec![i]);
                next.push(q);
            }
            out = next;
        }
        out
    }

    /// Exhaustive oracle: among all (partition, center-per-block) choices,
    /// keep those where members are within threshold of their center, the
    /// centers are exactly the greedy candidates in order, and each block
    /// is every neighbour of its center not claimed by an earlier block.
    fn oracle(keys: &[String], vs: &[EmbeddingVector<f64>], t: f64) -> Vec<(usize, Vec<usize>)> {
        let n = vs.len();
        let sim = |a: usize, b: usize| a == b || dot(vs[a].as_slice(), vs[b].as_slice()) >= t;
        let deg: Vec<usize> = (0..n).map(|i| (0..n).filter(|&j| sim(i, j)).count()).collect();
        let mut rank: Vec<usize> = (0..n).collect();
        rank.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(keys[a].cmp(&keys[b])));
        let mut valid = Vec::new();
        for p in partitions(n) {
            let blocks = p.len();
            let mut choice = vec![0usize; blocks];
            loop {
                let centered: Vec<(usize, Vec<usize>)> =
                    p.iter().zip(&choice).map(|(b, &k)| (b[k], b.clone())).collect();
                let within = centered.iter().all(|(c, b)| b.iter().all(|&m| sim(*c, m)));
                let mut ordered = centered.clone();
                ordered.sort_by_key(|(c, _)| rank.iter().position(|r| r == c).unwrap());
                let mut claimed = vec![false; n];
                let mut greedy = within;
                for (c, b) in &ordered {
                    let first_free = rank.iter().copied().find(|&r| !claimed[r]);
                    let expect: BTreeSet<usize> = (0..n).filter(|&j| !claimed[j] && sim(*c, j)).collect();
                    if first_free != Some(*c) || expect != b.iter().copied().collect() {
                        greedy = false;
                        break;
                    }
                    b.iter().for_each(|&m| claimed[m] = true);
                }
                if greedy {
                    valid.push(
                        ordered
                            .into_iter()
                            .map(|(c, mut b)| {
                                b.sort_by(|&x, &y| keys[x].cmp(&keys[y]));
                                (c, b)
                            })
                            .collect::<Vec<_>>(),
                    );
                }
                // next center choice
                let mut k = 0;
                loop {
                    if k == blocks {
                        break;
                    }
                    choice[k] += 1;
                    if choice[k] < p[k].len() {
                        break;
                    }
                    choice[k] = 0;
                    k += 1;
                }
                if k == blocks {
                    break;
                }
            }
        }
        assert_eq!(valid.len(), 1, "oracle must find exactly one greedy partition");
        valid.remove(0)
    }

    #[test]
    fn planted_pairs_match_exhaustive_oracle() {
        // Three planted near-duplicate pairs in 3-space.
        let vs = vec![
            unit(&[1.0, 0.0, 0.0]),
            unit(&[1.0, 0.05, 0.0]),
            unit(&[0.0, 1.0, 0.0]),
            unit(&[0.0, 1.0, 0.1]),
            unit(&[0.0, 0.0, 1.0]),
            unit(&[0.1, 0.0, 1.0]),
        ];
        let ks = keys(6);
        let got: Vec<(usize, Vec<usize>)> = greedy_community_clustering(&ks, &vs, 0.95, 2)
            .unwrap()
            .into_iter()
            .map(|c| (c.center, c.members))
            .collect();
        assert_eq!(got, oracle(&ks, &vs, 0.95));
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn random_small_sets_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..60 {
            let n = 1 + trial % 6;
            // Low-dimensional points so clusters actually form.
            let vs: Vec<_> = (0..n)
                .map(|_| unit(&[1.0, rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]))
                .collect();
            let ks = keys(n);
            let got: Vec<(usize, Vec<usize>)> = greedy_community_clustering(&ks, &vs, 0.95, 4)
                .unwrap()
                .into_iter()
                .map(|c| (c.center, c.members))
                .collect();
            assert_eq!(got, oracle(&ks, &vs, 0.95), "trial {trial}");
        }
    }

    #[test]
    fn naming_examples() {
        let a = unit(&[1.0, 0.0]);
        assert_eq!(name_cluster(&["only"], &[&a]), "only");
        let b = unit(&[0.0, 1.0]);
        assert_eq!(name_cluster(&["zeta", "alpha"], &[&a, &b]), "alpha");
        // The middle vector is the mean direction.
        let l = unit(&[1.0, 0.2]);
        let m = unit(&[1.0, 0.0]);
        let r = unit(&[1.0, -0.2]);
        assert_eq!(name_cluster(&["left", "mid", "right"], &[&l, &m, &r]), "mid");
        // Antipodal pair: zero mean.
        let neg = unit(&[-1.0, 0.0]);
        assert_eq!(name_cluster(&["b", "a"], &[&a, &neg]), "a");
    }

    #[test]
    fn naming_matches_argmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let vs: Vec<_> = (0..n)
                .map(|_| unit(&[1.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
                .collect();
            let names = keys(n);
            let mean: Vec<f64> = (0..3).map(|d| vs.iter().map(|v| v.as_slice()[d]).sum::<f64>() / n as f64).collect();
            // Two-member clusters tie exactly; the first (smallest) name wins.
            let scores: Vec<f64> = vs.iter().map(|v| cosine_similarity(v.as_slice(), &mean).unwrap()).collect();
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            let best = (0..n).find(|&i| top - scores[i] <= 1e-12).unwrap();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let vrefs: Vec<&EmbeddingVector<f64>> = vs.iter().collect();
            assert_eq!(name_cluster(&refs, &vrefs), names[best]);
        }
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> EmbeddingTable<f64> {
        EmbeddingTable::from_pairs(entries.iter().map(|(n, v)| (n.to_string(), unit(v))))
    }

    fn chain_vectors() -> Vec<(&'static str, Vec<f64>)> {
        // Gram matrix: ab = 0.96, bc = 0.96, ac = 0.90.
        let b2 = (1.0f64 - 0.96 * 0.96).sqrt();
        let c2 = (0.96 - 0.96 * 0.9) / b2;
        let c3 = (1.0 - 0.81 - c2 * c2).sqrt();
        vec![
            ("a", vec![1.0, 0.0, 0.0, 0.0]),
            ("b", vec![0.96, b2, 0.0, 0.0]),
            ("c", vec![0.9, c2, c3, 0.0]),
            ("far", vec![0.0, 0.0, 0.0, 1.0]),
        ]
    }

    /// Connected components of the graph `sim >= t`.
    fn transitive_closure(names: &[&str], t: &EmbeddingTable<f64>, th: f64) -> BTreeSet<BTreeSet<String>> {
        let n = names.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for i in 0..n {
            for j in 0..n {
                if t.similarity(names[i], names[j]).unwrap() >= th {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri] = rj;
                }
            }
        }
        let mut comps: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            comps.entry(r).or_default().insert(names[i].to_string());
        }
        comps.into_values().collect()
    }

    #[test]
    fn chain_merges_within_two_iterations() {
        let entries = chain_vectors();
        let t = table(&entries);
        assert!((t.similarity("a", "b").unwrap() - 0.96).abs() < 1e-12);
        assert!((t.similarity("a", "c").unwrap() - 0.90).abs() < 1e-12);
        let skills: Vec<String> = entries.iter().map(|(n, _)| n.to_string()).collect();
        let (index, report) = dedup_loop(&skills, &t, &BTreeMap::new(), "test", DedupParams::default()).unwrap();
        assert!(report.iterations <= 2);
        let got: BTreeSet<BTreeSet<String>> = index
            .clusters
            .iter()
            .map(|c| c.members.iter().cloned().collect())
            .collect();
        let names: Vec<&str> = entries.iter().map(|(n, _)| *n).collect();
        assert_eq!(got, transitive_closure(&names, &t, 0.95));
        index.validate().unwrap();
    }

    #[test]
    fn fixed_point_terminates_after_one_pass() {
        let t = table(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0]), ("z", vec![1.0, 1.0])]);
        let skills: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
        let (index, report) = dedup_loop(&skills, &t, &BTreeMap::new(), "test", DedupParams::default()).unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(index.clusters.len(), 3);
    }

    #[test]
    fn dedup_merges_instance_sets_and_canonicalises_names() {
        let t = table(&[("Trigonometry", vec![1.0, 0.0]), ("Algebra", vec![0.0, 1.0])]);
        let skills: Vec<String> = ["trigonometry", "Trigonometry", " Algebra "].map(String::from).to_vec();
        let mut inst = BTreeMap::new();
        inst.insert("trigonometry".to_string(), BTreeSet::from(["x/1".to_string(), "x/2".to_string()]));
        inst.insert("algebra".to_string(), BTreeSet::from(["x/3".to_string()]));
        let (index, _) = dedup_loop(&skills, &t, &inst, "test", DedupParams::default()).unwrap();
        assert_eq!(index.skill_count(), 2);
        let trig = index.clusters.iter().find(|c| c.name == "Trigonometry").unwrap();
        assert_eq!(trig.instance_ids.len(), 2);
    }

    #[test]
    fn histogram_examples() {
        let mk = |sizes: &[usize]| SkillIndex {
            threshold: 0.95,
            embedder_id: "t".into(),
            clusters: sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| SkillCluster {
                    cluster_id: i as u32,
                    name: format!("s{i}"),
                    members: vec![format!("s{i}")],
                    instance_ids: (0..n).map(|k| format!("b/{k}")).collect(),
                })
                .collect(),
        };
        assert_eq!(granularity_histogram(&mk(&[5]), &GRANULARITY_BINS).unwrap(), vec![1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            granularity_histogram(&mk(&[5, 150, 1200]), &GRANULARITY_BINS).unwrap(),
            vec![1, 0, 0, 0, 1, 0, 1]
        );
        let overlapping = [SizeBin::new(0, Some(10)), SizeBin::new(5, Some(20))];
        assert!(granularity_histogram(&mk(&[5]), &overlapping).is_err());
        let unbounded_first = [SizeBin::new(0, None), SizeBin::new(5, Some(20))];
        assert!(granularity_histogram(&mk(&[5]), &unbounded_first).is_err());
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = EmbeddingVector::normalized(v) {
                return u;
            }
        }
    }

    proptest! {
        #[test]
        fn partition_and_center_guarantee(seed in any::<u64>(), n in 0usize..60, dim in 2usize..5, block in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<_> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
            let ks = keys(n);
            let clusters = greedy_community_clustering(&ks, &vs, 0.9, block).unwrap();
            let mut seen = vec![0usize; n];
            for c in &clusters {
                prop_assert!(c.members.contains(&c.center));
                for &m in &c.members {
                    seen[m] += 1;
                    prop_assert!(m == c.center || dot(vs[m].as_slice(), vs[c.center].as_slice()) >= 0.9);
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            // Deterministic, and independent of block size.
            prop_assert_eq!(&clusters, &greedy_community_clustering(&ks, &vs, 0.9, 1000).unwrap());
        }

        #[test]
        fn dedup_count_is_monotone(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<(String, EmbeddingVector<f64>)> =
                (0..n).map(|i| (format!("k{i}"), random_unit(&mut rng, 2))).collect();
            let skills: Vec<String> = entries.iter().map(|(k, _)| k.clone()).collect();
            let t = EmbeddingTable::from_pairs(entries);
            let (index, report) = dedup_loop(&skills, &t, &BTreeMap::new(), "t", DedupParams::default()).unwrap();
            prop_assert!(report.cluster_counts.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(report.iterations <= 5);
            prop_assert_eq!(index.skill_count(), n);
            prop_assert!(index.validate().is_ok());
        }
    }
}
