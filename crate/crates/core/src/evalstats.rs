//! Validation metrics over gold-labeled descriptors and significance-based
//! stereotype surfacing.
//!
//! Lower scores mean a stronger association. Ties are broken by the lowest
//! candidate id everywhere.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::apx::{BiasScoreTable, Metric};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("gold descriptor {0:?} is not in the score table")]
    MissingDescriptor(String),
    #[error("gold target {0:?} is not a candidate")]
    UnknownTarget(String),
    #[error("descriptor {descriptor:?} has no valid score for {target:?}")]
    InvalidScore { descriptor: String, target: String },
    #[error("no gold labels")]
    Empty,
    #[error("group {0:?} has no category")]
    Uncategorized(String),
    #[error("alpha must lie in (0, 0.5), got {0}")]
    BadAlpha(f64),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub descriptor: String,
    /// Group label or category name.
    pub target: String,
}

/// Candidate labels, each covering one or more rows of a score table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    pub labels: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl Candidates {
    /// One candidate per group, in table order.
    pub fn groups(table: &BiasScoreTable) -> Self {
        Self {
            labels: table.group_labels(),
            members: (0..table.groups.len()).map(|i| vec![i]).collect(),
        }
    }

    /// One candidate per category, sorted by name; groups map through their
    /// ethnicity.
    pub fn categories(table: &BiasScoreTable, category_of_ethnicity: &BTreeMap<String, String>) -> Result<Self> {
        let mut by_cat: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, g) in table.groups.iter().enumerate() {
            let cat = category_of_ethnicity
                .get(&g.ethnicity)
                .ok_or_else(|| EvalError::Uncategorized(g.label()))?;
            by_cat.entry(cat.clone()).or_default().push(i);
        }
        let (labels, members) = by_cat.into_iter().unzip();
        Ok(Self { labels, members })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Unweighted mean of the valid member scores for descriptor `j`; a
    /// candidate with no valid member has no score.
    pub fn scores(&self, table: &BiasScoreTable, j: usize) -> Vec<Option<f64>> {
        self.members
            .iter()
            .map(|rows| {
                let vals: Vec<f64> = rows.iter().filter_map(|&i| table.scores[i][j]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}

/// Index of the smallest valid score, lowest index on ties.
pub fn argmin(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// 1-based rank of `target` when valid candidates are sorted by (score, id).
pub fn rank_of(scores: &[Option<f64>], target: usize) -> Option<usize> {
    let t = scores.get(target).copied().flatten()?;
    Some(
        1 + scores
            .iter()
            .enumerate()
            .filter(|&(i, s)| matches!(*s, Some(v) if v < t || (v == t && i < target)))
            .count(),
    )
}

fn resolve<'a>(
    table: &BiasScoreTable,
    gold: &'a [GoldLabel],
    cands: &Candidates,
) -> Result<Vec<(&'a GoldLabel, Vec<Option<f64>>, usize)>> {
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    gold.iter()
        .map(|g| {
            let j = table
                .descriptor_index(&g.descriptor)
                .ok_or_else(|| EvalError::MissingDescriptor(g.descriptor.clone()))?;
            let t = cands
                .index_of(&g.target)
                .ok_or_else(|| EvalError::UnknownTarget(g.target.clone()))?;
            let scores = cands.scores(table, j);
            if scores[t].is_none() {
                return Err(EvalError::InvalidScore {
                    descriptor: g.descriptor.clone(),
                    target: g.target.clone(),
                });
            }
            Ok((g, scores, t))
        })
        .collect()
}

/// Fraction of gold descriptors whose lowest-scoring candidate is the target.
pub fn argmin_accuracy(table: &BiasScoreTable, gold: &[GoldLabel], cands: &Candidates) -> Result<f64> {
    let rows = resolve(table, gold, cands)?;
    let hits = rows.iter().filter(|(_, s, t)| argmin(s) == Some(*t)).count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Mean of `1 / rank` of the gold target over gold descriptors.
pub fn mean_reciprocal_rank(table: &BiasScoreTable, gold: &[GoldLabel], cands: &Candidates) -> Result<f64> {
    let rows = resolve(table, gold, cands)?;
    let sum: f64 = rows
        .iter()
        .map(|(_, s, t)| 1.0 / rank_of(s, *t).expect("target validated") as f64)
        .sum();
    Ok(sum / rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accuracy_ppl: f64,
    pub accuracy_apx: f64,
    pub mrr_ppl: f64,
    pub mrr_apx: f64,
    pub apx_direction: String,
    pub candidates: Vec<String>,
    pub n_descriptors: usize,
    pub chance_accuracy: f64,
}

pub fn validation_report(
    ppl: &BiasScoreTable,
    apx: &BiasScoreTable,
    gold: &[GoldLabel],
    cands: &Candidates,
) -> Result<ValidationReport> {
    let direction = match apx.metric {
        Metric::Apx(d) => d.to_string(),
        Metric::Ppl => "none".into(),
    };
    Ok(ValidationReport {
        accuracy_ppl: argmin_accuracy(ppl, gold, cands)?,
        accuracy_apx: argmin_accuracy(apx, gold, cands)?,
        mrr_ppl: mean_reciprocal_rank(ppl, gold, cands)?,
        mrr_apx: mean_reciprocal_rank(apx, gold, cands)?,
        apx_direction: direction,
        candidates: cands.labels.clone(),
        n_descriptors: gold.len(),
        chance_accuracy: 1.0 / cands.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacedStereotype {
    pub descriptor: String,
    pub group: String,
    pub score: f64,
    pub zscore: f64,
    /// Set in permutation mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum SurfaceMethod {
    /// Normal critical value against the descriptor's own group distribution.
    ZScore,
    /// Empirical lower tail of z-scores from row-shuffled tables.
    Permutation { shuffles: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub alpha: f64,
    pub method: SurfaceMethod,
}

impl Default for SurfaceParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            method: SurfaceMethod::ZScore,
        }
    }
}

/// One-tailed normal critical value, `Phi^-1(1 - alpha)`.
pub fn z_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(EvalError::BadAlpha(alpha));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - alpha))
}

/// z-scores of the valid entries using the sample (n - 1) standard
/// deviation. `None` when fewer than 3 valid entries or zero spread.
pub fn zscores(scores: &[Option<f64>]) -> Option<Vec<Option<f64>>> {
    let vals: Vec<f64> = scores.iter().filter_map(|s| *s).collect();
    if vals.len() < 3 {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return None;
    }
    Some(scores.iter().map(|s| s.map(|v| (v - mean) / sd)).collect())
}

/// Sorted pooled null z-scores: each shuffle draws, for every group, one of
/// its own scores at a random descriptor and standardizes the draw.
fn permutation_null(table: &BiasScoreTable, columns: &[usize], shuffles: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = table
        .scores
        .iter()
        .map(|r| columns.iter().filter_map(|&j| r[j]).collect())
        .collect();
    let mut null = Vec::with_capacity(shuffles * rows.len());
    let mut draw = Vec::with_capacity(rows.len());
    for _ in 0..shuffles {
        draw.clear();
        for r in &rows {
            draw.push((!r.is_empty()).then(|| r[rng.random_range(0..r.len())]));
        }
        if let Some(z) = zscores(&draw) {
            null.extend(z.into_iter().flatten());
        }
    }
    null.sort_by(f64::total_cmp);
    null
}

/// Groups significantly associated with each surfaceable descriptor,
/// descriptor-major in table order, then by group id.
pub fn surface_stereotypes(table: &BiasScoreTable, params: &SurfaceParams) -> Result<Vec<SurfacedStereotype>> {
    let z_crit = z_critical(params.alpha)?;
    let columns = table.surfaceable_descriptors();
    let labels = table.group_labels();
    let null = match params.method {
        SurfaceMethod::ZScore => None,
        SurfaceMethod::Permutation { shuffles, seed } => Some(permutation_null(table, &columns, shuffles, seed)),
    };
    let mut out = Vec::new();
    for &j in &columns {
        let col = table.column(j);
        let Some(z) = zscores(&col) else { continue };
        for (i, zi) in z.iter().enumerate() {
            let Some(zi) = *zi else { continue };
            let p_value = null.as_ref().map(|null| {
                let below = null.partition_point(|&v| v <= zi);
                (1 + below) as f64 / (1 + null.len()) as f64
            });
            let hit = match p_value {
                Some(p) => p <= params.alpha,
                None => zi <= -z_crit,
            };
            if hit {
                out.push(SurfacedStereotype {
                    descriptor: table.descriptors[j].clone(),
                    group: labels[i].clone(),
                    score: col[i].expect("valid z implies valid score"),
                    zscore: zi,
                    p_value,
                });
            }
        }
    }
    Ok(out)
}

/// Associated groups per descriptor, in surfacing order.
pub fn associations_by_descriptor(surfaced: &[SurfacedStereotype]) -> Vec<(String, Vec<String>)> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for s in surfaced {
        match out.last_mut() {
            Some((d, gs)) if *d == s.descriptor => gs.push(s.group.clone()),
            _ => out.push((s.descriptor.clone(), vec![s.group.clone()])),
        }
    }
    out
}

/// Associated descriptors per group, groups in table order.
pub fn associations_by_group(table: &BiasScoreTable, surfaced: &[SurfacedStereotype]) -> Vec<(String, Vec<String>)> {
    table
        .group_labels()
        .into_iter()
        .map(|g| {
            let ds = surfaced
                .iter()
                .filter(|s| s.group == g)
                .map(|s| s.descriptor.clone())
                .collect();
            (g, ds)
        })
        .collect()
}
