//! Stereotype leakage in generated profiles: feature encoding, stratified
//! splitting, one-vs-rest linear classifiers, feature elimination and
//! Jensen-Shannon word shifts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{GroupKey, NameSet};
use crate::genharness::CharacterProfile;
use crate::util;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("stratum {0:?} has fewer than 2 profiles")]
    TinyStratum(String),
    #[error("no profiles to analyse")]
    Empty,
    #[error("task {0} has a single class")]
    SingleClass(Task),
    #[error("vector has index {index} outside dimension {dim}")]
    Dimension { index: usize, dim: usize },
    #[error("unknown feature group {0:?}")]
    UnknownFeature(String),
    #[error("feature {0} has fewer than 2 groups with entries")]
    TooFewGroups(FeatureGroup),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Religion,
    HairColour,
    Height,
    SexualOrientation,
    Hobbies,
    Build,
    SocioeconomicStatus,
    SkinColour,
    EyeColour,
    PersonalityTraits,
    NegativeTraits,
    Age,
    Occupation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    OneHot,
    RelativeFrequency,
}

impl FeatureGroup {
    /// The 13 groups in report order.
    pub const ALL: [FeatureGroup; 13] = [
        FeatureGroup::Religion,
        FeatureGroup::HairColour,
        FeatureGroup::Height,
        FeatureGroup::SexualOrientation,
        FeatureGroup::Hobbies,
        FeatureGroup::Build,
        FeatureGroup::SocioeconomicStatus,
        FeatureGroup::SkinColour,
        FeatureGroup::EyeColour,
        FeatureGroup::PersonalityTraits,
        FeatureGroup::NegativeTraits,
        FeatureGroup::Age,
        FeatureGroup::Occupation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureGroup::Religion => "religion",
            FeatureGroup::HairColour => "hair_colour",
            FeatureGroup::Height => "height",
            FeatureGroup::SexualOrientation => "sexual_orientation",
            FeatureGroup::Hobbies => "hobbies",
            FeatureGroup::Build => "build",
            FeatureGroup::SocioeconomicStatus => "socioeconomic_status",
            FeatureGroup::SkinColour => "skin_colour",
            FeatureGroup::EyeColour => "eye_colour",
            FeatureGroup::PersonalityTraits => "personality_traits",
            FeatureGroup::NegativeTraits => "negative_traits",
            FeatureGroup::Age => "age",
            FeatureGroup::Occupation => "occupation",
        }
    }

    pub fn encoding(self) -> Encoding {
        match self {
            FeatureGroup::Hobbies | FeatureGroup::PersonalityTraits | FeatureGroup::NegativeTraits => {
                Encoding::RelativeFrequency
            }
            _ => Encoding::OneHot,
        }
    }

    /// Normalized entries of this field: lowercased, trimmed whole entries;
    /// age as a decade bucket, height as a 0.25 ft bucket.
    pub fn entries(self, p: &CharacterProfile) -> Vec<String> {
        let one = |v: &Option<String>| v.iter().map(|s| normalize_entry(s)).filter(|s| !s.is_empty()).collect();
        let many = |v: &Vec<String>| v.iter().map(|s| normalize_entry(s)).filter(|s| !s.is_empty()).collect();
        match self {
            FeatureGroup::Religion => one(&p.religion),
            FeatureGroup::HairColour => one(&p.hair_colour),
            FeatureGroup::SexualOrientation => one(&p.sexual_orientation),
            FeatureGroup::Build => one(&p.build),
            FeatureGroup::SocioeconomicStatus => one(&p.socioeconomic_status),
            FeatureGroup::SkinColour => one(&p.skin_colour),
            FeatureGroup::EyeColour => one(&p.eye_colour),
            FeatureGroup::Occupation => one(&p.occupation),
            FeatureGroup::Hobbies => many(&p.hobbies),
            FeatureGroup::PersonalityTraits => many(&p.personality_traits),
            FeatureGroup::NegativeTraits => many(&p.negative_traits),
            FeatureGroup::Age => p.age.map(age_bucket).into_iter().collect(),
            FeatureGroup::Height => p.height_ft.map(height_bucket).into_iter().collect(),
        }
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureGroup {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| AnalysisError::UnknownFeature(s.to_string()))
    }
}

pub fn normalize_entry(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn age_bucket(age: u32) -> String {
    let lo = age / 10 * 10;
    format!("{lo}-{}", lo + 9)
}

pub fn height_bucket(ft: f64) -> String {
    let lo = (ft / 0.25).floor() * 0.25;
    format!("{lo:.2}-{:.2}", lo + 0.25)
}

/// Sparse vector as sorted (index, value) pairs.
pub type SparseVec = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub group: FeatureGroup,
    pub offset: usize,
    /// Sorted vocabulary; the block's last slot is the OOV index.
    pub vocab: Vec<String>,
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn oov_index(&self) -> usize {
        self.offset + self.vocab.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub blocks: Vec<FeatureBlock>,
    pub dim: usize,
}

impl FeatureSpace {
    /// Vocabularies from the given (training) profiles only.
    pub fn build(train: &[&CharacterProfile], groups: &[FeatureGroup]) -> Self {
        let mut blocks = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for &group in groups {
            let vocab: BTreeSet<String> = train.iter().flat_map(|p| group.entries(p)).collect();
            let block = FeatureBlock {
                group,
                offset,
                vocab: vocab.into_iter().collect(),
            };
            offset += block.width();
            blocks.push(block);
        }
        Self { blocks, dim: offset }
    }

    pub fn encode(&self, p: &CharacterProfile) -> SparseVec {
        let mut out = Vec::new();
        for b in &self.blocks {
            let entries = b.group.entries(p);
            if entries.is_empty() {
                continue;
            }
            let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
            for e in &entries {
                let idx = b
                    .vocab
                    .binary_search(e)
                    .map(|i| b.offset + i)
                    .unwrap_or_else(|_| b.oov_index());
                *counts.entry(idx).or_default() += 1.0;
            }
            match b.group.encoding() {
                Encoding::OneHot => {
                    let (&idx, _) = counts.iter().next().expect("nonempty");
                    out.push((idx, 1.0));
                }
                Encoding::RelativeFrequency => {
                    let n = entries.len() as f64;
                    out.extend(counts.into_iter().map(|(i, c)| (i, c / n)));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GenderEthnicity,
    Ethnicity,
    Gender,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::GenderEthnicity, Task::Ethnicity, Task::Gender];

    pub fn label(self, g: &GroupKey) -> String {
        match self {
            Task::GenderEthnicity => g.label(),
            Task::Ethnicity => g.ethnicity.clone(),
            Task::Gender => g.gender.long_name().to_string(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::GenderEthnicity => "gender_ethnicity",
            Task::Ethnicity => "ethnicity",
            Task::Gender => "gender",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Task::GenderEthnicity => "Gender + Ethnicity",
            Task::Ethnicity => "Ethnicity",
            Task::Gender => "Gender",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per stratum, a seeded shuffle then `floor(fraction * n)` to train. The
/// leftover slots needed to reach `round(fraction * N)` overall go to the
/// strata with the largest fractional remainders (ties to the earlier
/// stratum), never emptying a stratum's test share.
pub fn stratified_split<K: Ord + Clone + fmt::Debug>(strata: &[K], fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AnalysisError::BadFraction(fraction));
    }
    if strata.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut by: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        by.entry(k.clone()).or_default().push(i);
    }
    let mut plan: Vec<(Vec<usize>, usize, f64)> = Vec::with_capacity(by.len());
    for (k, mut idx) in by {
        if idx.len() < 2 {
            return Err(AnalysisError::TinyStratum(format!("{k:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(seed, &format!("{k:?}")));
        idx.shuffle(&mut rng);
        let exact = fraction * idx.len() as f64;
        let take = (exact.floor() as usize).min(idx.len() - 1);
        plan.push((idx, take, exact - exact.floor()));
    }
    let target = (fraction * strata.len() as f64).round() as usize;
    let mut assigned: usize = plan.iter().map(|p| p.1).sum();
    let mut order: Vec<usize> = (0..plan.len()).collect();
    order.sort_by(|&a, &b| plan[b].2.total_cmp(&plan[a].2).then(a.cmp(&b)));
    for s in order {
        if assigned >= target {
            break;
        }
        if plan[s].1 + 1 < plan[s].0.len() {
            plan[s].1 += 1;
            assigned += 1;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, take, _) in plan {
        train.extend_from_slice(&idx[..take]);
        test.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 20,
        }
    }
}

/// Binary linear classifier `w . [x, 1]`; the constant feature's weight is
/// the bias and is regularized like the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryModel {
    pub weights: Vec<f64>,
    /// Regularized hinge objective after each epoch.
    pub objective: Vec<f64>,
}

fn dot(w: &[f64], x: &SparseVec) -> f64 {
    let bias = w[w.len() - 1];
    x.iter().map(|&(j, v)| w[j] * v).sum::<f64>() + bias
}

/// `lambda/2 |w|^2 + mean hinge(y w.x)`.
pub fn svm_objective(w: &[f64], xs: &[SparseVec], ys: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = xs.iter().zip(ys).map(|(x, &y)| (1.0 - y * dot(w, x)).max(0.0)).sum();
    reg + hinge / xs.len() as f64
}

/// Pegasos stochastic subgradient descent with step `1 / (lambda t)` and
/// seeded shuffling each epoch. The returned weights are the uniform average
/// of the iterates after the first epoch. `ys` are +1 / -1.
pub fn pegasos_binary(xs: &[SparseVec], ys: &[f64], dim: usize, params: &SvmParams, seed: u64) -> BinaryModel {
    let lambda = params.lambda;
    let d = dim + 1;
    let bias = dim;
    // w = s * v, so the shrink step is O(1)
    let mut v = vec![0.0; d];
    let mut s = 1.0f64;
    // lazy running sum of iterates: acc[j] + v[j] * (c_sum - mark[j])
    let mut acc = vec![0.0; d];
    let mut mark = vec![0.0; d];
    let mut c_sum = 0.0f64;
    let mut averaged_steps = 0u64;
    let burn_in = usize::from(params.epochs >= 2);
    let mut t = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut objective = Vec::with_capacity(params.epochs);
    let mut w = vec![0.0; d];
    for epoch in 0..params.epochs {
        let averaging = epoch >= burn_in;
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &xs[i];
            let y = ys[i];
            let margin = y * s * dot(&v, x);
            let decay = 1.0 - eta * lambda;
            if decay <= 0.0 || s * decay < 1e-100 {
                // fold s into v (or drop it); flush the running sum first
                if averaging {
                    for j in 0..d {
                        acc[j] += v[j] * (c_sum - mark[j]);
                        mark[j] = 0.0;
                    }
                    c_sum = 0.0;
                }
                let scale = if decay <= 0.0 { 0.0 } else { s * decay };
                v.iter_mut().for_each(|c| *c *= scale);
                s = 1.0;
            } else {
                s *= decay;
            }
            let c_prev = c_sum;
            if averaging {
                c_sum += s;
                averaged_steps += 1;
            }
            if margin < 1.0 {
                let c = eta * y / s;
                for &(j, xv) in x.iter().chain(std::iter::once(&(bias, 1.0))) {
                    if averaging {
                        acc[j] += v[j] * (c_prev - mark[j]);
                        mark[j] = c_prev;
                    }
                    v[j] += c * xv;
                }
            }
        }
        if averaging && averaged_steps > 0 {
            for j in 0..d {
                w[j] = (acc[j] + v[j] * (c_sum - mark[j])) / averaged_steps as f64;
            }
        } else {
            for j in 0..d {
                w[j] = v[j] * s;
            }
        }
        objective.push(svm_objective(&w, xs, ys, lambda));
    }
    BinaryModel { weights: w, objective }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: Vec<String>,
    pub dim: usize,
    pub params: SvmParams,
    pub seed: u64,
    pub per_class: Vec<BinaryModel>,
}

impl LinearModel {
    pub fn scores(&self, x: &SparseVec) -> Result<Vec<f64>> {
        if let Some(&(index, _)) = x.iter().find(|(j, _)| *j >= self.dim) {
            return Err(AnalysisError::Dimension { index, dim: self.dim });
        }
        Ok(self.per_class.iter().map(|m| dot(&m.weights, x)).collect())
    }

    /// Highest-scoring class, lowest id on ties.
    pub fn predict(&self, x: &SparseVec) -> Result<usize> {
        let s = self.scores(x)?;
        let mut best = 0;
        for (c, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = c;
            }
        }
        Ok(best)
    }
}

/// One-vs-rest training; each class gets a seed derived from `seed` and its
/// label, so parallel and serial training agree.
pub fn train_ovr(
    xs: &[SparseVec],
    labels: &[usize],
    classes: &[String],
    dim: usize,
    params: &SvmParams,
    seed: u64,
) -> LinearModel {
    let per_class = (0..classes.len())
        .into_par_iter()
        .map(|c| {
            let ys: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            pegasos_binary(xs, &ys, dim, params, util::derive_seed(seed, &classes[c]))
        })
        .collect();
    LinearModel {
        classes: classes.to_vec(),
        dim,
        params: params.clone(),
        seed,
        per_class,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_classifier(model: &LinearModel, xs: &[SparseVec], labels: &[usize]) -> Result<Evaluation> {
    if xs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let k = model.classes.len();
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    for (x, &y) in xs.iter().zip(labels) {
        let p = model.predict(x)?;
        confusion[y][p] += 1;
        if p == y {
            correct += 1;
        }
    }
    Ok(Evaluation {
        correct,
        total: xs.len(),
        accuracy: correct as f64 / xs.len() as f64,
        confusion,
    })
}

/// Profiles paired with the group of the name they were generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProfiles {
    pub profiles: Vec<CharacterProfile>,
    pub groups: Vec<GroupKey>,
}

impl LabeledProfiles {
    /// Keep valid profiles whose name belongs to `names`; returns the kept
    /// set and the number dropped.
    pub fn from_names(profiles: &[CharacterProfile], names: &NameSet) -> (Self, usize) {
        let lookup: HashMap<&str, GroupKey> = names
            .names()
            .iter()
            .map(|n| (n.given_name.as_str(), GroupKey::new(n.ethnicity.clone(), n.gender)))
            .collect();
        let mut out = LabeledProfiles {
            profiles: Vec::new(),
            groups: Vec::new(),
        };
        let mut dropped = 0;
        for p in profiles {
            match lookup.get(p.name.as_str()) {
                Some(g) if p.is_valid() => {
                    out.profiles.push(p.clone());
                    out.groups.push(g.clone());
                }
                _ => dropped += 1,
            }
        }
        (out, dropped)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn split(&self, fraction: f64, seed: u64) -> Result<Split> {
        stratified_split(&self.groups, fraction, seed)
    }

    /// Sorted class labels and each profile's class id for `task`.
    pub fn task_labels(&self, task: Task) -> (Vec<String>, Vec<usize>) {
        let classes: Vec<String> = self
            .groups
            .iter()
            .map(|g| task.label(g))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ids = self
            .groups
            .iter()
            .map(|g| classes.binary_search(&task.label(g)).expect("class present"))
            .collect();
        (classes, ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: Task,
    pub classes: Vec<String>,
    pub evaluation: Evaluation,
}

/// Build the space from the training split, train per task, evaluate on
/// the test split.
pub fn run_tasks(
    data: &LabeledProfiles,
    split: &Split,
    features: &[FeatureGroup],
    tasks: &[Task],
    params: &SvmParams,
    seed: u64,
) -> Result<Vec<TaskResult>> {
    let train_profiles: Vec<&CharacterProfile> = split.train.iter().map(|&i| &data.profiles[i]).collect();
    let space = FeatureSpace::build(&train_profiles, features);
    let encoded: Vec<SparseVec> = data.profiles.iter().map(|p| space.encode(p)).collect();
    let xs_train: Vec<SparseVec> = split.train.iter().map(|&i| encoded[i].clone()).collect();
    let xs_test: Vec<SparseVec> = split.test.iter().map(|&i| encoded[i].clone()).collect();
    tasks
        .iter()
        .map(|&task| {
            let (classes, ids) = data.task_labels(task);
            if classes.len() < 2 {
                return Err(AnalysisError::SingleClass(task));
            }
            let y_train: Vec<usize> = split.train.iter().map(|&i| ids[i]).collect();
            let y_test: Vec<usize> = split.test.iter().map(|&i| ids[i]).collect();
            let model = train_ovr(
                &xs_train,
                &y_train,
                &classes,
                space.dim,
                params,
                util::derive_seed(seed, task.as_str()),
            );
            Ok(TaskResult {
                task,
                evaluation: evaluate_classifier(&model, &xs_test, &y_test)?,
                classes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationRow {
    pub feature: FeatureGroup,
    /// Test-set correct counts per task, in report task order.
    pub correct: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Retrained minus baseline accuracy, per task.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationReport {
    pub tasks: Vec<Task>,
    pub test_size: usize,
    pub baseline: Vec<TaskResult>,
    pub rows: Vec<EliminationRow>,
}

/// Retrain without each feature group in turn, on the same split and seed.
pub fn feature_elimination(
    data: &LabeledProfiles,
    split: &Split,
    features: &[FeatureGroup],
    tasks: &[Task],
    params: &SvmParams,
    seed: u64,
) -> Result<EliminationReport> {
    let baseline = run_tasks(data, split, features, tasks, params, seed)?;
    let rows = features
        .par_iter()
        .map(|&removed| {
            let kept: Vec<FeatureGroup> = features.iter().copied().filter(|&f| f != removed).collect();
            let results = run_tasks(data, split, &kept, tasks, params, seed)?;
            let correct: Vec<usize> = results.iter().map(|r| r.evaluation.correct).collect();
            let accuracy: Vec<f64> = results.iter().map(|r| r.evaluation.accuracy).collect();
            let delta = accuracy
                .iter()
                .zip(&baseline)
                .map(|(a, b)| a - b.evaluation.accuracy)
                .collect();
            Ok(EliminationRow {
                feature: removed,
                correct,
                accuracy,
                delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EliminationReport {
        tasks: tasks.to_vec(),
        test_size: split.test.len(),
        baseline,
        rows,
    })
}

pub type Distribution = BTreeMap<String, f64>;

fn xlog2(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).log2()
    } else {
        0.0
    }
}

/// Per-word terms `p/2 log2(p/m) + q/2 log2(q/m)` with `m = (p + q) / 2`;
/// each is non-negative and they sum to the divergence.
pub fn jsd_contributions(p: &Distribution, q: &Distribution) -> BTreeMap<String, f64> {
    let words: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    words
        .into_iter()
        .map(|w| {
            let pw = p.get(w).copied().unwrap_or(0.0);
            let qw = q.get(w).copied().unwrap_or(0.0);
            let m = 0.5 * (pw + qw);
            (w.clone(), 0.5 * xlog2(pw, m) + 0.5 * xlog2(qw, m))
        })
        .collect()
}

/// Jensen-Shannon divergence in bits.
pub fn jsd(p: &Distribution, q: &Distribution) -> f64 {
    jsd_contributions(p, q).values().sum()
}

pub fn normalize_counts(counts: &BTreeMap<String, f64>) -> Distribution {
    let total: f64 = counts.values().sum();
    counts.iter().map(|(w, c)| (w.clone(), c / total)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdShiftEntry {
    pub feature: FeatureGroup,
    pub word: String,
    pub contribution: f64,
    pub groups: Vec<String>,
}

/// Over-representation ratio at or above which a group is listed for a word.
pub const ASSOCIATION_RATIO: f64 = 2.0;

/// Top-`k` words of `feature` by their largest JSD contribution in a group
/// where they are over-represented against all other groups pooled.
pub fn jsd_top_words(data: &LabeledProfiles, feature: FeatureGroup, k: usize) -> Result<Vec<JsdShiftEntry>> {
    let mut counts: BTreeMap<&GroupKey, BTreeMap<String, f64>> = BTreeMap::new();
    for (p, g) in data.profiles.iter().zip(&data.groups) {
        let entry = counts.entry(g).or_default();
        for w in feature.entries(p) {
            *entry.entry(w).or_default() += 1.0;
        }
    }
    counts.retain(|_, c| !c.is_empty());
    if counts.len() < 2 {
        return Err(AnalysisError::TooFewGroups(feature));
    }
    let mut pooled: BTreeMap<String, f64> = BTreeMap::new();
    for c in counts.values() {
        for (w, n) in c {
            *pooled.entry(w.clone()).or_default() += n;
        }
    }
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    let mut associated: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (g, c) in &counts {
        let rest: BTreeMap<String, f64> = pooled
            .iter()
            .map(|(w, n)| (w.clone(), n - c.get(w).copied().unwrap_or(0.0)))
            .filter(|(_, n)| *n > 0.0)
            .collect();
        let p = normalize_counts(c);
        let q = normalize_counts(&rest);
        for (w, contrib) in jsd_contributions(&p, &q) {
            let pw = p.get(&w).copied().unwrap_or(0.0);
            let qw = q.get(&w).copied().unwrap_or(0.0);
            if pw > qw {
                let b = best.entry(w.clone()).or_insert(0.0);
                *b = b.max(contrib);
                if qw == 0.0 || pw / qw >= ASSOCIATION_RATIO {
                    associated.entry(w).or_default().push(g.label());
                }
            }
        }
    }
    let mut ranked: Vec<(String, f64)> = best.into_iter().filter(|(_, c)| *c > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked
        .into_iter()
        .map(|(word, contribution)| JsdShiftEntry {
            feature,
            groups: associated.remove(&word).unwrap_or_default(),
            word,
            contribution,
        })
        .collect())
}
