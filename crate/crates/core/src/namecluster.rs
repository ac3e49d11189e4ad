//! Name selection by embedding clustering.
//!
//! Name embeddings are clustered with mini-batch k-means (k-means++ seeding,
//! per-center learning rate `1 / points seen`). Clusters whose labeled
//! members mostly share one (ethnicity, gender) group are treated as
//! confidently labeled, and each group's names are sampled from them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Gender, GroupKey, NameEntry};
use crate::util;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("record {name:?} has dimension {found}, expected {expected}")]
    RaggedDimension {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("record {name:?} contains a non-finite value at position {index}")]
    NonFinite { name: String, index: usize },
    #[error("no embedding records")]
    Empty,
    #[error("k = {k} exceeds the number of records ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("label for clustered name {0:?} is missing")]
    MissingLabel(String),
    #[error("insufficient qualifying names: {}", format_shortfalls(.0))]
    Insufficient(Vec<Shortfall>),
}

fn format_shortfalls(s: &[Shortfall]) -> String {
    s.iter()
        .map(|s| format!("{} has {}/{}", s.group, s.found, s.needed))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub name: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    /// Checks the shared-dimension and finiteness invariants.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let first = records.first().ok_or(ClusterError::Empty)?;
        let dim = first.vector.len();
        if dim == 0 {
            return Err(ClusterError::InvalidParam("zero-dimensional vectors".into()));
        }
        for r in &records {
            if r.vector.len() != dim {
                return Err(ClusterError::RaggedDimension {
                    name: r.name.clone(),
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if let Some(index) = r.vector.iter().position(|v| !v.is_finite()) {
                return Err(ClusterError::NonFinite {
                    name: r.name.clone(),
                    index,
                });
            }
        }
        Ok(Self { dim, records })
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.vector.clone()).collect()
    }
}

/// Load embeddings from JSONL (`{"name": .., "vector": [..]}` per line) or,
/// for a `.csv` path, from rows of `name,v1,v2,...` with a header row.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let io_err = |source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    };
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut records = Vec::new();
    if is_csv {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| ClusterError::Parse {
                path: path.to_path_buf(),
                line: 0,
                reason: e.to_string(),
            })?;
        for (idx, rec) in rdr.records().enumerate() {
            let parse_err = |reason: String| ClusterError::Parse {
                path: path.to_path_buf(),
                line: idx + 2,
                reason,
            };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let name = rec.get(0).unwrap_or("").to_string();
            let vector = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            records.push(EmbeddingRecord { name, vector });
        }
    } else {
        let reader = BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| ClusterError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            records.push(rec);
        }
    }
    EmbeddingSet::new(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    /// L2-normalize vectors before clustering.
    pub normalize: bool,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 100,
            batch: 1024,
            iters: 200,
            seed: 0,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid: Vec<f64>,
    pub members: Vec<String>,
    /// Fraction of labeled members sharing the modal group.
    pub agreement: f64,
    pub modal_group: Option<GroupKey>,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Full-data inertia after initialization and after every iteration.
    pub inertia_trace: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        // strict `<` keeps the lowest index on ties
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Nearest-centroid assignment (Euclidean), ties to the lowest index.
pub fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    data.par_iter().map(|p| nearest(p, centroids).0).collect()
}

/// Sum of squared distances to the nearest centroid.
pub fn inertia(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    let dists: Vec<f64> = data.par_iter().map(|p| nearest(p, centroids).1).collect();
    // sequential sum so the result does not depend on thread scheduling
    dists.iter().sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the closest chosen center.
pub fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centroids = vec![data[rng.random_range(0..n)].clone()];
    let mut closest: Vec<f64> = data
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data[pick].clone();
        for (slot, p) in closest.iter_mut().zip(data) {
            *slot = slot.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Move centroids of empty clusters onto the farthest point of the largest
/// cluster until every cluster has a member (or no progress is possible).
fn reseed_empty(data: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centroids.len();
    let mut assignments = assign(data, centroids);
    for _ in 0..k {
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            break;
        }
        let farthest = assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == largest)
            .map(|(i, _)| (i, squared_distance(&data[i], &centroids[largest])))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        centroids[empty] = data[farthest].clone();
        assignments = assign(data, centroids);
    }
    assignments
}

/// Mini-batch k-means on raw vectors.
pub fn minibatch_kmeans_vectors(data: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansFit> {
    let n = data.len();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if params.k == 0 {
        return Err(ClusterError::InvalidParam("k must be at least 1".into()));
    }
    if params.k > n {
        return Err(ClusterError::TooManyClusters { k: params.k, n });
    }
    if params.batch == 0 {
        return Err(ClusterError::InvalidParam("batch must be at least 1".into()));
    }
    let owned;
    let data = if params.normalize {
        owned = data.iter().map(|v| l2_normalize(v)).collect::<Vec<_>>();
        &owned[..]
    } else {
        data
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(data, params.k, &mut rng);
    let mut counts = vec![0u64; params.k];
    let mut trace = vec![inertia(data, &centroids)];
    let batch = params.batch.min(n);

    for _ in 0..params.iters {
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, batch).into_vec();
        idx.sort_unstable();
        let batch_points: Vec<&Vec<f64>> = idx.iter().map(|&i| &data[i]).collect();
        let labels: Vec<usize> = batch_points
            .par_iter()
            .map(|p| nearest(p, &centroids).0)
            .collect();
        for (point, &c) in batch_points.iter().zip(&labels) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (w, x) in centroids[c].iter_mut().zip(point.iter()) {
                *w += eta * (x - *w);
            }
        }
        trace.push(inertia(data, &centroids));
    }

    let assignments = reseed_empty(data, &mut centroids);
    let inertia = inertia(data, &centroids);
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        inertia_trace: trace,
    })
}

/// Cluster embedding records. Returned clusters carry members but no labels;
/// see [`label_clusters`].
pub fn minibatch_kmeans(set: &EmbeddingSet, params: &KMeansParams) -> Result<(KMeansFit, Vec<Cluster>)> {
    let data = set.vectors();
    let fit = minibatch_kmeans_vectors(&data, params)?;
    let mut clusters: Vec<Cluster> = fit
        .centroids
        .iter()
        .map(|c| Cluster {
            centroid: c.clone(),
            members: Vec::new(),
            agreement: 0.0,
            modal_group: None,
        })
        .collect();
    for (rec, &a) in set.records.iter().zip(&fit.assignments) {
        clusters[a].members.push(rec.name.clone());
    }
    clusters.retain(|c| !c.members.is_empty());
    Ok((fit, clusters))
}

/// Fill each cluster's modal group and agreement from the provided labels.
/// Members without a label are ignored. Ties go to the smallest group key.
pub fn label_clusters(clusters: &mut [Cluster], labels: &BTreeMap<String, GroupKey>) {
    for cluster in clusters {
        let mut counts: BTreeMap<&GroupKey, usize> = BTreeMap::new();
        let mut labeled = 0;
        for m in &cluster.members {
            if let Some(g) = labels.get(m) {
                *counts.entry(g).or_default() += 1;
                labeled += 1;
            }
        }
        let modal = counts
            .iter()
            .fold(None::<(&GroupKey, usize)>, |best, (g, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((g, c)),
            });
        match modal {
            Some((g, c)) => {
                cluster.modal_group = Some((*g).clone());
                cluster.agreement = c as f64 / labeled as f64;
            }
            None => {
                cluster.modal_group = None;
                cluster.agreement = 0.0;
            }
        }
    }
}

fn share_of(cluster: &Cluster, labels: &BTreeMap<String, GroupKey>, pred: impl Fn(&GroupKey) -> bool) -> f64 {
    let labeled: Vec<&GroupKey> = cluster.members.iter().filter_map(|m| labels.get(m)).collect();
    if labeled.is_empty() {
        return 0.0;
    }
    labeled.iter().filter(|g| pred(g)).count() as f64 / labeled.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectParams {
    pub per_group: usize,
    /// A cluster qualifies for a group when the group's share of the
    /// cluster's labeled members is strictly above this.
    pub min_agreement: f64,
    pub seed: u64,
    /// Ethnicities whose missing gender is filled with opposite-gender names
    /// from clusters dominated by that ethnicity.
    pub opposite_gender_fill: Vec<String>,
    /// Return what was found instead of failing when a group is short.
    pub allow_shortfall: bool,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self {
            per_group: 10,
            min_agreement: 0.5,
            seed: 0,
            opposite_gender_fill: Vec::new(),
            allow_shortfall: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub group: GroupKey,
    pub found: usize,
    pub needed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub names: Vec<NameEntry>,
    pub shortfalls: Vec<Shortfall>,
    /// Groups filled through the opposite-gender rule.
    pub filled_by_opposite_gender: Vec<GroupKey>,
}

fn sample_names(mut candidates: Vec<String>, per_group: usize, seed: u64, group: &GroupKey) -> Vec<String> {
    candidates.sort();
    candidates.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(seed, &group.label()));
    candidates.shuffle(&mut rng);
    candidates.truncate(per_group);
    candidates.sort();
    candidates
}

/// Sample `per_group` names for every labeled group from clusters whose
/// agreement for that group exceeds `min_agreement`.
pub fn select_group_names(
    clusters: &[Cluster],
    labels: &BTreeMap<String, GroupKey>,
    params: &SelectParams,
) -> Result<Selection> {
    for c in clusters {
        if let Some(m) = c.members.iter().find(|m| !labels.contains_key(*m)) {
            return Err(ClusterError::MissingLabel(m.clone()));
        }
    }
    let valid_name = |name: &str, g: &GroupKey| NameEntry::new(name, g.ethnicity.clone(), g.gender).is_ok();

    let groups: BTreeSet<GroupKey> = labels.values().cloned().collect();
    let mut names = Vec::new();
    let mut used: HashSet<String> = HashSet::new();
    let mut shortfalls = Vec::new();
    for group in &groups {
        let candidates: Vec<String> = clusters
            .iter()
            .filter(|c| share_of(c, labels, |g| g == group) > params.min_agreement)
            .flat_map(|c| c.members.iter())
            .filter(|m| labels.get(*m) == Some(group) && valid_name(m, group))
            .cloned()
            .collect();
        let picked = sample_names(candidates, params.per_group, params.seed, group);
        if picked.len() < params.per_group {
            shortfalls.push(Shortfall {
                group: group.clone(),
                found: picked.len(),
                needed: params.per_group,
            });
        }
        for p in picked {
            used.insert(p.clone());
            names.push(NameEntry::new(p, group.ethnicity.clone(), group.gender).expect("validated"));
        }
    }

    let mut filled = Vec::new();
    for ethnicity in &params.opposite_gender_fill {
        for gender in [Gender::F, Gender::M] {
            let group = GroupKey::new(ethnicity.clone(), gender);
            let has_other = groups.contains(&GroupKey::new(ethnicity.clone(), gender.opposite()));
            if groups.contains(&group) || !has_other {
                continue;
            }
            let candidates: Vec<String> = clusters
                .iter()
                .filter(|c| share_of(c, labels, |g| &g.ethnicity == ethnicity) > params.min_agreement)
                .flat_map(|c| c.members.iter())
                .filter(|m| {
                    labels.get(*m).is_some_and(|g| g.gender == gender)
                        && !used.contains(*m)
                        && valid_name(m, &group)
                })
                .cloned()
                .collect();
            let picked = sample_names(candidates, params.per_group, params.seed, &group);
            if picked.len() < params.per_group {
                shortfalls.push(Shortfall {
                    group: group.clone(),
                    found: picked.len(),
                    needed: params.per_group,
                });
            }
            for p in picked {
                used.insert(p.clone());
                names.push(NameEntry::new(p, ethnicity.clone(), gender).expect("validated"));
            }
            filled.push(group);
        }
    }

    if !shortfalls.is_empty() && !params.allow_shortfall {
        return Err(ClusterError::Insufficient(shortfalls));
    }
    Ok(Selection {
        names,
        shortfalls,
        filled_by_opposite_gender: filled,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReportEntry {
    pub id: usize,
    pub size: usize,
    pub agreement: f64,
    pub modal_group: Option<String>,
    pub members: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub params: KMeansParams,
    pub inertia: f64,
    pub clusters: Vec<ClusterReportEntry>,
}

pub fn cluster_report(params: &KMeansParams, fit: &KMeansFit, clusters: &[Cluster], dump_centroids: bool) -> ClusterReport {
    ClusterReport {
        params: params.clone(),
        inertia: fit.inertia,
        clusters: clusters
            .iter()
            .enumerate()
            .map(|(id, c)| ClusterReportEntry {
                id,
                size: c.members.len(),
                agreement: c.agreement,
                modal_group: c.modal_group.as_ref().map(GroupKey::label),
                members: c.members.clone(),
                centroid: dump_centroids.then(|| c.centroid.clone()),
            })
            .collect(),
    }
}
