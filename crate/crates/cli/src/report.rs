//! Consolidated, paper-shaped report tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use stereoprobe::profileanalysis::{FeatureGroup, Task};

use crate::config::Config;
use crate::manifest::StageRecord;
use crate::stages::{
    read_json, AccuracyArtifact, EliminationArtifact, JsdArtifact, Layout, Result, Stage, StageError, SurfaceArtifact,
    ValidationArtifact,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    All,
}

impl ReportFormat {
    fn csv(self) -> bool {
        matches!(self, ReportFormat::Csv | ReportFormat::All)
    }

    fn json(self) -> bool {
        matches!(self, ReportFormat::Json | ReportFormat::All)
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "all" => Ok(ReportFormat::All),
            other => Err(format!("unknown report format {other:?} (csv | json | all)")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::All => "all",
        })
    }
}

/// `0.183` -> `18.3%`.
pub fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

/// Like [`pct`] without a trailing `.0`: `0.05` -> `5%`, `0.025` -> `2.5%`.
pub fn chance_pct(x: f64) -> String {
    let s = format!("{:.1}", x * 100.0);
    format!("{}%", s.strip_suffix(".0").unwrap_or(&s))
}

/// Signed accuracy change in points: `-4.1%`, `+0.3%`, `0.0%`.
pub fn signed_delta(d: f64) -> String {
    let s = format!("{:.1}", d * 100.0);
    if s == "0.0" || s == "-0.0" {
        "0.0%".into()
    } else if d > 0.0 {
        format!("+{s}%")
    } else {
        format!("{s}%")
    }
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let err = |e: csv::Error| StageError::Invalid(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| StageError::Invalid(e.to_string()))
}

fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// One row per group with at least one surfaced descriptor, groups and
/// descriptors in case-insensitive alphabetical order.
pub fn appendix_rows(s: &SurfaceArtifact) -> Vec<Vec<String>> {
    let mut by_group: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for st in &s.stereotypes {
        by_group.entry(&st.group).or_default().push(&st.descriptor);
    }
    let mut groups: Vec<(&str, Vec<&str>)> = by_group.into_iter().collect();
    groups.sort_by_key(|(g, _)| (g.to_lowercase(), g.to_string()));
    groups
        .into_iter()
        .map(|(g, mut ds)| {
            ds.sort_by_key(|d| (d.to_lowercase(), d.to_string()));
            ds.dedup();
            vec![g.to_string(), ds.join(", ")]
        })
        .collect()
}

fn task_title(t: Task) -> &'static str {
    t.title()
}

/// Header plus chance row plus one row per model.
pub fn accuracy_table(tasks: &[Task], models: &[AccuracyArtifact]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["Model".to_string()];
    header.extend(tasks.iter().map(|&t| task_title(t).to_string()));
    let mut rows = Vec::new();
    if let Some(first) = models.first() {
        let mut chance = vec!["Chance Level".to_string()];
        for &t in tasks {
            let n = first.results.iter().find(|r| r.task == t).map_or(0, |r| r.classes.len());
            chance.push(if n == 0 { String::new() } else { chance_pct(1.0 / n as f64) });
        }
        rows.push(chance);
    }
    for m in models {
        let mut row = vec![m.model_id.clone()];
        for &t in tasks {
            row.push(
                m.results
                    .iter()
                    .find(|r| r.task == t)
                    .map_or_else(String::new, |r| pct(r.evaluation.accuracy)),
            );
        }
        rows.push(row);
    }
    (header, rows)
}

/// Feature x model signed deltas for one task, led by the baseline row.
pub fn elimination_table(task: Task, models: &[EliminationArtifact]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["Feature Eliminated".to_string()];
    header.extend(models.iter().map(|m| m.model_id.clone()));
    let col = |m: &EliminationArtifact| m.report.tasks.iter().position(|&t| t == task);
    let mut overall = vec!["Overall Accuracy (%)".to_string()];
    for m in models {
        overall.push(col(m).map_or_else(String::new, |c| pct(m.report.baseline[c].evaluation.accuracy)));
    }
    let mut rows = vec![overall];
    let mut features: Vec<FeatureGroup> = Vec::new();
    for m in models {
        for r in &m.report.rows {
            if !features.contains(&r.feature) {
                features.push(r.feature);
            }
        }
    }
    for f in features {
        let mut row = vec![f.as_str().to_string()];
        for m in models {
            let cell = col(m)
                .and_then(|c| m.report.rows.iter().find(|r| r.feature == f).map(|r| signed_delta(r.delta[c])))
                .unwrap_or_default();
            row.push(cell);
        }
        rows.push(row);
    }
    (header, rows)
}

#[derive(Serialize)]
struct ReportJson<'a> {
    surfacing: &'a [SurfaceArtifact],
    validation: &'a [ValidationArtifact],
    accuracy: &'a [AccuracyArtifact],
    elimination: &'a [EliminationArtifact],
    jsd: &'a [JsdArtifact],
}

pub fn write_report(cfg: &Config, layout: &Layout, format: ReportFormat, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    if cfg.scoring.models.is_empty() && cfg.generation.models.is_empty() {
        return Err(StageError::Invalid(
            "nothing to report: configure scoring.models or generation.models".into(),
        ));
    }
    let dir = layout.report_dir();
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();

    let mut surfacing = Vec::new();
    let mut validation = Vec::new();
    for name in &cfg.scoring.models {
        surfacing.push(read_json::<SurfaceArtifact>(&layout.surfaced_json(name), Stage::Surface)?);
        if cfg.inputs.category_map.is_some() {
            validation.push(read_json::<ValidationArtifact>(&layout.validation(name), Stage::Validate)?);
        }
    }
    let mut accuracy = Vec::new();
    let mut elimination = Vec::new();
    let mut jsd = Vec::new();
    for name in &cfg.generation.models {
        accuracy.push(read_json::<AccuracyArtifact>(&layout.accuracy(name), Stage::Analyze)?);
        elimination.push(read_json::<EliminationArtifact>(&layout.elimination(name), Stage::Analyze)?);
        jsd.push(read_json::<JsdArtifact>(&layout.jsd_json(name), Stage::Jsd)?);
    }

    if format.csv() {
        let mut detail = Vec::new();
        for (name, s) in cfg.scoring.models.iter().zip(&surfacing) {
            let rows = appendix_rows(s);
            rec.count(format!("{name}.groups_with_associations"), rows.len());
            files.push((
                dir.join(format!("surfaced_stereotypes_{name}.csv")),
                csv_bytes(&strings(["Group", "Associated Descriptors"]), &rows)?,
            ));
            for st in &s.stereotypes {
                detail.push(vec![
                    s.model_id.clone(),
                    st.descriptor.clone(),
                    st.group.clone(),
                    st.score.to_string(),
                    st.zscore.to_string(),
                    st.p_value.map(|p| p.to_string()).unwrap_or_default(),
                ]);
            }
        }
        if !surfacing.is_empty() {
            files.push((
                dir.join("surfaced_detail.csv"),
                csv_bytes(&strings(["model", "descriptor", "group", "score", "zscore", "p_value"]), &detail)?,
            ));
        }
        if !validation.is_empty() {
            let acc: Vec<Vec<String>> = validation
                .iter()
                .map(|v| vec![v.model_id.clone(), pct(v.configured.accuracy_ppl), pct(v.configured.accuracy_apx)])
                .collect();
            let mrr: Vec<Vec<String>> = validation
                .iter()
                .map(|v| vec![v.model_id.clone(), pct(v.configured.mrr_ppl), pct(v.configured.mrr_apx)])
                .collect();
            files.push((
                dir.join("validation_accuracy.csv"),
                csv_bytes(&strings(["Model", "Acc. (PPL)", "Acc. (APX)"]), &acc)?,
            ));
            files.push((
                dir.join("validation_mrr.csv"),
                csv_bytes(&strings(["Model", "MRR (PPL)", "MRR (APX)"]), &mrr)?,
            ));
        }
        if !accuracy.is_empty() {
            let (h, rows) = accuracy_table(&cfg.analysis.tasks, &accuracy);
            files.push((dir.join("classification_accuracy.csv"), csv_bytes(&h, &rows)?));
            for &t in &cfg.analysis.tasks {
                let (h, rows) = elimination_table(t, &elimination);
                files.push((
                    dir.join(format!("feature_elimination_{}.csv", t.as_str())),
                    csv_bytes(&h, &rows)?,
                ));
            }
            for (name, j) in cfg.generation.models.iter().zip(&jsd) {
                let rows: Vec<Vec<String>> = j
                    .entries
                    .iter()
                    .map(|e| vec![e.feature.as_str().to_string(), e.word.clone(), e.groups.join(", ")])
                    .collect();
                files.push((
                    dir.join(format!("jsd_top_words_{name}.csv")),
                    csv_bytes(&strings(["Feature", "Word", "Associated Groups"]), &rows)?,
                ));
            }
        }
    }
    if format.json() {
        let body = ReportJson {
            surfacing: &surfacing,
            validation: &validation,
            accuracy: &accuracy,
            elimination: &elimination,
            jsd: &jsd,
        };
        let mut text = serde_json::to_string_pretty(&body).map_err(|e| StageError::Invalid(e.to_string()))?;
        text.push('\n');
        files.push((dir.join("report.json"), text.into_bytes()));
    }
    rec.count("files", files.len());
    let mut out = Vec::new();
    for (path, bytes) in files {
        stereoprobe::util::write_bytes_atomic(&path, &bytes).map_err(|source| StageError::Io {
            path: path.clone(),
            source,
        })?;
        out.push(path);
    }
    Ok(out)
}
