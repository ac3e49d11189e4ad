//! Adjusted perplexity and per-(group, descriptor) bias scores.
//!
//! Per template, `group_mean(i)` is the mean of row `i` and `total_mean` the
//! mean of the whole matrix (valid cells only). As printed, the adjustment is
//! `APX = PPL * group_mean / total_mean`; the inverse direction
//! `PPL * total_mean / group_mean` is available as a switch. Bias scores
//! average the adjusted matrices over templates after dividing each by its
//! own grand mean.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{GroupKey, Sentence};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApxError {
    #[error("every cell of row {row} is invalid")]
    EmptyRow { row: usize },
    #[error("table has no valid cells")]
    AllInvalid,
    #[error("total mean is zero")]
    ZeroTotal,
    #[error("cell value {value} is below 1 or not finite")]
    BadCell { value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown template id {0}")]
    UnknownTemplate(usize),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("unknown descriptor {0:?}")]
    UnknownDescriptor(String),
}

pub type Result<T> = std::result::Result<T, ApxError>;

/// A |G| x |D| matrix whose `None` entries are invalid cells.
pub type Matrix = Vec<Vec<Option<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApxDirection {
    #[default]
    AsPrinted,
    Inverse,
}

impl ApxDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ApxDirection::AsPrinted => "as_printed",
            ApxDirection::Inverse => "inverse",
        }
    }
}

impl fmt::Display for ApxDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ApxDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "as_printed" => Ok(ApxDirection::AsPrinted),
            "inverse" => Ok(ApxDirection::Inverse),
            other => Err(format!("unknown apx direction {other:?} (as_printed | inverse)")),
        }
    }
}

/// What a bias score is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "metric", content = "apx_direction")]
pub enum Metric {
    Ppl,
    Apx(ApxDirection),
}

impl Metric {
    pub fn label(self) -> String {
        match self {
            Metric::Ppl => "ppl".into(),
            Metric::Apx(d) => format!("apx_{d}"),
        }
    }
}

fn valid(row: &[Option<f64>]) -> impl Iterator<Item = f64> + '_ {
    row.iter().filter_map(|c| *c)
}

/// Mean over the valid cells of row `i`.
pub fn group_mean(m: &Matrix, i: usize) -> Result<f64> {
    let row = m.get(i).ok_or_else(|| ApxError::Shape(format!("no row {i}")))?;
    let (sum, n) = valid(row).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(ApxError::EmptyRow { row: i });
    }
    Ok(sum / n as f64)
}

/// Mean over all valid cells.
pub fn total_mean(m: &Matrix) -> Result<f64> {
    let (sum, n) = m
        .iter()
        .flat_map(|r| valid(r))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(ApxError::AllInvalid);
    }
    Ok(sum / n as f64)
}

/// Adjusted perplexity matrix. Rows with no valid cell stay invalid.
pub fn apx_adjust(m: &Matrix, direction: ApxDirection) -> Result<Matrix> {
    let total = total_mean(m)?;
    if total == 0.0 {
        return Err(ApxError::ZeroTotal);
    }
    Ok(m.iter()
        .enumerate()
        .map(|(i, row)| {
            let Ok(gm) = group_mean(m, i) else {
                return vec![None; row.len()];
            };
            let factor = match direction {
                ApxDirection::AsPrinted => gm / total,
                ApxDirection::Inverse => total / gm,
            };
            row.iter().map(|c| c.map(|v| v * factor)).collect()
        })
        .collect())
}

/// Divide every valid cell by the matrix's grand mean.
pub fn normalize_by_grand_mean(m: &Matrix) -> Result<Matrix> {
    let grand = total_mean(m)?;
    if grand == 0.0 {
        return Err(ApxError::ZeroTotal);
    }
    Ok(m.iter()
        .map(|row| row.iter().map(|c| c.map(|v| v / grand)).collect())
        .collect())
}

/// Per-template PPL matrices over a fixed group and descriptor axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplTable {
    pub groups: Vec<GroupKey>,
    pub descriptors: Vec<String>,
    pub template_ids: Vec<usize>,
    /// `templates[t][i][j]`.
    pub templates: Vec<Matrix>,
}

impl PplTable {
    pub fn new(
        groups: Vec<GroupKey>,
        descriptors: Vec<String>,
        template_ids: Vec<usize>,
        templates: Vec<Matrix>,
    ) -> Result<Self> {
        if templates.len() != template_ids.len() {
            return Err(ApxError::Shape(format!(
                "{} template ids for {} matrices",
                template_ids.len(),
                templates.len()
            )));
        }
        for (t, m) in templates.iter().enumerate() {
            if m.len() != groups.len() || m.iter().any(|r| r.len() != descriptors.len()) {
                return Err(ApxError::Shape(format!(
                    "template {t} is not {}x{}",
                    groups.len(),
                    descriptors.len()
                )));
            }
            for v in m.iter().flat_map(|r| valid(r)) {
                if !v.is_finite() || v < 1.0 {
                    return Err(ApxError::BadCell { value: v });
                }
            }
        }
        Ok(Self {
            groups,
            descriptors,
            template_ids,
            templates,
        })
    }

    pub fn invalid_cells(&self) -> usize {
        self.templates
            .iter()
            .flat_map(|m| m.iter().flatten())
            .filter(|c| c.is_none())
            .count()
    }
}

#[derive(Debug, Clone, Default)]
struct CellAcc {
    sum: f64,
    ok: usize,
    failed: usize,
}

/// Counts from turning sentence scores into cells.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellReport {
    pub cells: usize,
    pub invalid_cells: usize,
    /// Failed sentences dropped from otherwise valid cells.
    pub dropped_failures: usize,
    pub ignored_sentences: usize,
}

/// Share of a cell's sentences that may fail before the cell is invalid.
pub const MAX_FAILED_SHARE: f64 = 0.001;

/// Accumulates sentence perplexities into per-(template, group, descriptor)
/// name means. A cell whose failures reach 0.1% of its sentences is invalid.
pub struct PplTableBuilder {
    groups: Vec<GroupKey>,
    descriptors: Vec<String>,
    template_ids: Vec<usize>,
    group_index: HashMap<GroupKey, usize>,
    descriptor_index: HashMap<String, usize>,
    template_index: HashMap<usize, usize>,
    cells: Vec<CellAcc>,
    ignored: usize,
}

impl PplTableBuilder {
    pub fn new(groups: Vec<GroupKey>, descriptors: Vec<String>, template_ids: Vec<usize>) -> Self {
        let group_index = groups.iter().cloned().enumerate().map(|(i, g)| (g, i)).collect();
        let descriptor_index = descriptors.iter().cloned().enumerate().map(|(j, d)| (d, j)).collect();
        let template_index = template_ids.iter().enumerate().map(|(t, &id)| (id, t)).collect();
        let n = groups.len() * descriptors.len() * template_ids.len();
        Self {
            groups,
            descriptors,
            template_ids,
            group_index,
            descriptor_index,
            template_index,
            cells: vec![CellAcc::default(); n],
            ignored: 0,
        }
    }

    fn slot(&self, sentence: &Sentence) -> Option<usize> {
        let t = *self.template_index.get(&sentence.template)?;
        let i = *self.group_index.get(&sentence.group_key())?;
        let j = *self.descriptor_index.get(&sentence.descriptor)?;
        Some((t * self.groups.len() + i) * self.descriptors.len() + j)
    }

    /// Record a sentence's perplexity, or `None` for a failed sentence.
    /// Sentences outside the table's axes are counted and ignored.
    pub fn add(&mut self, sentence: &Sentence, ppl: Option<f64>) {
        let Some(k) = self.slot(sentence) else {
            self.ignored += 1;
            return;
        };
        let cell = &mut self.cells[k];
        match ppl {
            Some(p) if p.is_finite() && p >= 1.0 => {
                cell.sum += p;
                cell.ok += 1;
            }
            _ => cell.failed += 1,
        }
    }

    pub fn build(self) -> (PplTable, CellReport) {
        let (g, d) = (self.groups.len(), self.descriptors.len());
        let mut report = CellReport {
            cells: self.cells.len(),
            ignored_sentences: self.ignored,
            ..Default::default()
        };
        let mut templates = Vec::with_capacity(self.template_ids.len());
        for t in 0..self.template_ids.len() {
            let mut m = vec![vec![None; d]; g];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    let acc = &self.cells[(t * g + i) * d + j];
                    let total = acc.ok + acc.failed;
                    let failed_share = if total == 0 { 1.0 } else { acc.failed as f64 / total as f64 };
                    if acc.ok == 0 || failed_share >= MAX_FAILED_SHARE {
                        report.invalid_cells += 1;
                    } else {
                        report.dropped_failures += acc.failed;
                        *cell = Some(acc.sum / acc.ok as f64);
                    }
                }
            }
            templates.push(m);
        }
        let table = PplTable {
            groups: self.groups,
            descriptors: self.descriptors,
            template_ids: self.template_ids,
            templates,
        };
        (table, report)
    }
}

/// Final per-(group, descriptor) scores. Lower means more associated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScoreTable {
    pub groups: Vec<GroupKey>,
    pub descriptors: Vec<String>,
    /// `scores[i][j]`; `None` marks an invalid score.
    pub scores: Matrix,
    #[serde(flatten)]
    pub metric: Metric,
    pub normalization: String,
    pub template_count: usize,
}

/// Share of invalid groups above which a descriptor is not surfaced.
pub const MAX_INVALID_GROUP_SHARE: f64 = 0.10;

impl BiasScoreTable {
    pub fn group_labels(&self) -> Vec<String> {
        self.groups.iter().map(GroupKey::label).collect()
    }

    pub fn descriptor_index(&self, text: &str) -> Option<usize> {
        self.descriptors.iter().position(|d| d == text)
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.scores.iter().map(|r| r[j]).collect()
    }

    pub fn invalid_share(&self, j: usize) -> f64 {
        let invalid = self.scores.iter().filter(|r| r[j].is_none()).count();
        invalid as f64 / self.groups.len().max(1) as f64
    }

    /// Descriptors with at most 10% invalid groups.
    pub fn surfaceable_descriptors(&self) -> Vec<usize> {
        (0..self.descriptors.len())
            .filter(|&j| self.invalid_share(j) <= MAX_INVALID_GROUP_SHARE)
            .collect()
    }

    /// CSV `group,descriptor,score`, descriptor-major; invalid scores are empty.
    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "descriptor", "score"])?;
        for (j, d) in self.descriptors.iter().enumerate() {
            for (i, g) in self.groups.iter().enumerate() {
                let score = self.scores[i][j].map(|s| s.to_string()).unwrap_or_default();
                out.write_record([g.label().as_str(), d.as_str(), score.as_str()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub const NORMALIZATION: &str = "template_grand_mean";

/// Full aggregation from a PPL table: optional APX adjustment per template,
/// division by the template grand mean, then the mean across templates.
/// A cell invalid in any template is invalid in the result.
pub fn bias_scores(table: &PplTable, metric: Metric) -> Result<BiasScoreTable> {
    if table.templates.is_empty() {
        return Err(ApxError::AllInvalid);
    }
    let (g, d) = (table.groups.len(), table.descriptors.len());
    let mut sum = vec![vec![Some(0.0); d]; g];
    for m in &table.templates {
        let adjusted = match metric {
            Metric::Ppl => m.clone(),
            Metric::Apx(dir) => apx_adjust(m, dir)?,
        };
        let normalized = normalize_by_grand_mean(&adjusted)?;
        for (acc_row, row) in sum.iter_mut().zip(&normalized) {
            for (acc, v) in acc_row.iter_mut().zip(row) {
                *acc = match (*acc, v) {
                    (Some(a), Some(v)) => Some(a + v),
                    _ => None,
                };
            }
        }
    }
    let n = table.templates.len() as f64;
    let scores = sum
        .into_iter()
        .map(|row| row.into_iter().map(|c| c.map(|v| v / n)).collect())
        .collect();
    Ok(BiasScoreTable {
        groups: table.groups.clone(),
        descriptors: table.descriptors.clone(),
        scores,
        metric,
        normalization: NORMALIZATION.into(),
        template_count: table.templates.len(),
    })
}
