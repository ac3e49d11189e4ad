//! Pipeline stages. Each stage reads its inputs and prior artifacts, writes
//! its own artifacts atomically, and records counts in the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stereoprobe::apx::{bias_scores, ApxDirection, BiasScoreTable, Metric, PplTable, PplTableBuilder};
use stereoprobe::corpus::{
    self, expand_sentences, load_descriptors, load_names, load_templates, default_templates, write_corpus_jsonl,
    Descriptor, GroupKey, LoadMode, NameSet, Sentence, Template, ValidationSubset,
};
use stereoprobe::evalstats::{
    surface_stereotypes, validation_report, Candidates, GoldLabel, SurfaceParams, SurfacedStereotype, ValidationReport,
};
use stereoprobe::genharness::{collect_profiles, generate_profiles, CharacterProfile, ProfileCache};
use stereoprobe::namecluster::{cluster_report, label_clusters, load_embeddings, minibatch_kmeans, select_group_names};
use stereoprobe::profileanalysis::{
    feature_elimination, jsd_top_words, EliminationReport, JsdShiftEntry, LabeledProfiles, SvmParams, TaskResult,
};
use stereoprobe::scoring::{score_corpus, ScoreCache, ScoreOptions, ScoreOutcome, ScoredSentence, ScoringError};
use stereoprobe::util;

use crate::config::{Config, ConfigError, SurfaceMetric};
use crate::manifest::{RunManifest, StageRecord};
use crate::report::{self, ReportFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Expand,
    Cluster,
    Score,
    Apx,
    Validate,
    Surface,
    Generate,
    Analyze,
    Jsd,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Expand,
        Stage::Cluster,
        Stage::Score,
        Stage::Apx,
        Stage::Validate,
        Stage::Surface,
        Stage::Generate,
        Stage::Analyze,
        Stage::Jsd,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Expand => "expand",
            Stage::Cluster => "cluster",
            Stage::Score => "score",
            Stage::Apx => "apx",
            Stage::Validate => "validate",
            Stage::Surface => "surface",
            Stage::Generate => "generate",
            Stage::Analyze => "analyze",
            Stage::Jsd => "jsd",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("missing artifact {}; run `stereoprobe {stage}` first", .path.display())]
    MissingArtifact { path: PathBuf, stage: Stage },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Cluster(#[from] stereoprobe::namecluster::ClusterError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Apx(#[from] stereoprobe::apx::ApxError),
    #[error(transparent)]
    Eval(#[from] stereoprobe::evalstats::EvalError),
    #[error(transparent)]
    Gen(#[from] stereoprobe::genharness::GenError),
    #[error(transparent)]
    Analysis(#[from] stereoprobe::profileanalysis::AnalysisError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {reason}", .path.display())]
    BadArtifact { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StageError>;

fn io_at(path: &Path) -> impl Fn(io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which expanded corpus an artifact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Corpus,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Corpus => "corpus",
            Split::Validation => "validation",
        }
    }
}

/// Artifact paths under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}.jsonl", split.as_str()))
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters/clusters.json")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("clusters/selection.json")
    }

    pub fn selected_names(&self) -> PathBuf {
        self.root.join("clusters/selected_names.csv")
    }

    pub fn score_cache(&self, model: &str) -> PathBuf {
        self.root.join("cache").join(format!("scores-{model}.jsonl"))
    }

    pub fn profile_cache(&self, model: &str) -> PathBuf {
        self.root.join("cache").join(format!("profiles-{model}.jsonl"))
    }

    fn model_dir(&self, section: &str, model: &str) -> PathBuf {
        self.root.join(section).join(model)
    }

    pub fn scored(&self, model: &str, split: Split) -> PathBuf {
        self.model_dir("scores", model).join(format!("{}_scored.jsonl", split.as_str()))
    }

    pub fn failed(&self, model: &str, split: Split) -> PathBuf {
        self.model_dir("scores", model).join(format!("{}_failed.jsonl", split.as_str()))
    }

    pub fn ppl_table(&self, model: &str, split: Split) -> PathBuf {
        self.model_dir("scores", model).join(format!("{}_ppl_table.json", split.as_str()))
    }

    pub fn cells(&self, model: &str, split: Split) -> PathBuf {
        self.model_dir("scores", model).join(format!("{}_cells.json", split.as_str()))
    }

    /// `kind` is `ppl` or `apx`; the extension picks JSON or CSV.
    pub fn bias(&self, model: &str, split: Split, kind: &str, ext: &str) -> PathBuf {
        self.model_dir("scores", model)
            .join(format!("{}_bias_{kind}.{ext}", split.as_str()))
    }

    pub fn validation(&self, model: &str) -> PathBuf {
        self.model_dir("scores", model).join("validation.json")
    }

    pub fn surfaced_csv(&self, model: &str) -> PathBuf {
        self.model_dir("scores", model).join("surfaced.csv")
    }

    pub fn surfaced_json(&self, model: &str) -> PathBuf {
        self.model_dir("scores", model).join("surfaced.json")
    }

    pub fn responses(&self, model: &str) -> PathBuf {
        self.model_dir("generation", model).join("responses.jsonl")
    }

    pub fn profiles(&self, model: &str) -> PathBuf {
        self.model_dir("generation", model).join("profiles.jsonl")
    }

    pub fn accuracy(&self, model: &str) -> PathBuf {
        self.model_dir("analysis", model).join("accuracy.json")
    }

    pub fn elimination(&self, model: &str) -> PathBuf {
        self.model_dir("analysis", model).join("elimination.json")
    }

    pub fn jsd_json(&self, model: &str) -> PathBuf {
        self.model_dir("analysis", model).join("jsd.json")
    }

    pub fn jsd_csv(&self, model: &str) -> PathBuf {
        self.model_dir("analysis", model).join("jsd.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Fail with a message naming the stage that produces `path`.
pub fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(StageError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T> {
    require(path, stage)?;
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| StageError::BadArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_jsonl_all<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>> {
    require(path, stage)?;
    util::read_jsonl(path)
        .map_err(io_at(path))?
        .map(|r| {
            r.map_err(|e| StageError::BadArtifact {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    util::write_json_atomic(path, value).map_err(io_at(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    util::write_bytes_atomic(path, bytes).map_err(io_at(path))
}

/// Streams a JSONL file, parking the first error instead of yielding it.
struct JsonlStream<'a, T> {
    inner: Box<dyn Iterator<Item = std::result::Result<T, util::JsonlError>> + 'a>,
    error: &'a mut Option<util::JsonlError>,
}

impl<T> Iterator for JsonlStream<'_, T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        if self.error.is_some() {
            return None;
        }
        match self.inner.next()? {
            Ok(v) => Some(v),
            Err(e) => {
                *self.error = Some(e);
                None
            }
        }
    }
}

fn stream_jsonl<'a, T: DeserializeOwned + 'a>(
    path: &Path,
    error: &'a mut Option<util::JsonlError>,
) -> Result<JsonlStream<'a, T>> {
    Ok(JsonlStream {
        inner: Box::new(util::read_jsonl(path).map_err(io_at(path))?),
        error,
    })
}

fn parked(path: &Path, error: Option<util::JsonlError>) -> Result<()> {
    match error {
        None => Ok(()),
        Some(e) => Err(StageError::BadArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

/// Everything loaded from the configured input files.
pub struct Inputs {
    pub names: NameSet,
    pub descriptors: Vec<Descriptor>,
    pub templates: Vec<Template>,
    pub validation: Option<ValidationSubset>,
    pub name_warnings: Vec<String>,
}

impl Inputs {
    pub fn load(cfg: &Config) -> Result<Self> {
        let i = &cfg.inputs;
        let mode = if i.lax_names { LoadMode::Lax } else { LoadMode::Strict };
        let loaded = load_names(&i.names, mode)?;
        let descriptors = load_descriptors(&i.descriptors)?;
        let templates = match &i.templates {
            Some(p) => load_templates(p)?,
            None => default_templates(),
        };
        let validation = match &i.category_map {
            Some(map) => {
                let labeled = match &i.validation_descriptors {
                    Some(p) => load_descriptors(p)?,
                    None => descriptors.clone(),
                };
                Some(corpus::validation_subset(&loaded.names, &labeled, map)?)
            }
            None => None,
        };
        let mut name_warnings = loaded.warnings;
        name_warnings.extend(loaded.rejected.iter().map(|r| format!("names row {}: {}", r.row, r.reason)));
        Ok(Self {
            names: loaded.names,
            descriptors,
            templates,
            validation,
            name_warnings,
        })
    }

    pub fn splits(&self) -> Vec<Split> {
        let mut v = vec![Split::Corpus];
        if self.validation.is_some() {
            v.push(Split::Validation);
        }
        v
    }

    fn split_parts(&self, split: Split) -> (&NameSet, &[Descriptor]) {
        match (split, &self.validation) {
            (Split::Validation, Some(v)) => (&v.names, &v.descriptors),
            _ => (&self.names, &self.descriptors),
        }
    }

    fn given_names(&self) -> Vec<String> {
        self.names.names().iter().map(|n| n.given_name.clone()).collect()
    }

    fn group_of_name(&self) -> HashMap<String, GroupKey> {
        self.names
            .names()
            .iter()
            .map(|n| (n.given_name.clone(), n.group_key()))
            .collect()
    }
}

fn need_models(models: &[String], stage: Stage, section: &str) -> Result<()> {
    if models.is_empty() {
        Err(StageError::Invalid(format!("{stage} needs at least one entry in {section}.models")))
    } else {
        Ok(())
    }
}

/// Run one stage end to end and persist its manifest record.
pub fn run_stage(stage: Stage, cfg: &Config, format: ReportFormat) -> Result<StageRecord> {
    let layout = Layout::new(&cfg.out_dir);
    std::fs::create_dir_all(&layout.root).map_err(io_at(&layout.root))?;
    let config_hash = cfg.hash();
    let mut manifest = RunManifest::open(&layout.root, &config_hash).map_err(io_at(&RunManifest::path(&layout.root)))?;
    record_inputs(&mut manifest, cfg)?;
    let mut rec = StageRecord {
        config_hash,
        ..Default::default()
    };
    let artifacts = match stage {
        Stage::Expand => expand(cfg, &layout, &mut rec)?,
        Stage::Cluster => cluster(cfg, &layout, &mut rec)?,
        Stage::Score => score(cfg, &layout, &mut rec)?,
        Stage::Apx => apx(cfg, &layout, &mut rec)?,
        Stage::Validate => validate(cfg, &layout, &mut rec)?,
        Stage::Surface => surface(cfg, &layout, &mut rec)?,
        Stage::Generate => generate(cfg, &layout, &mut rec)?,
        Stage::Analyze => analyze(cfg, &layout, &mut rec)?,
        Stage::Jsd => jsd(cfg, &layout, &mut rec)?,
        Stage::Report => report::write_report(cfg, &layout, format, &mut rec)?,
    };
    for path in artifacts {
        let hash = util::file_sha256(&path).map_err(io_at(&path))?;
        let rel = path.strip_prefix(&layout.root).unwrap_or(&path);
        rec.artifacts.insert(rel.to_string_lossy().replace('\\', "/"), hash);
    }
    manifest.stages.insert(stage.as_str().to_string(), rec.clone());
    manifest.save(&layout.root).map_err(io_at(&RunManifest::path(&layout.root)))?;
    Ok(rec)
}

fn record_inputs(manifest: &mut RunManifest, cfg: &Config) -> Result<()> {
    let i = &cfg.inputs;
    let entries = [
        ("names", Some(&i.names)),
        ("descriptors", Some(&i.descriptors)),
        ("templates", i.templates.as_ref()),
        ("category_map", i.category_map.as_ref()),
        ("validation_descriptors", i.validation_descriptors.as_ref()),
        ("embeddings", i.embeddings.as_ref()),
        ("name_labels", i.name_labels.as_ref()),
    ];
    for (label, path) in entries {
        if let Some(p) = path {
            manifest.record_input(label, p).map_err(io_at(p))?;
        }
    }
    Ok(())
}

fn expand(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    let inputs = Inputs::load(cfg)?;
    rec.notes.extend(inputs.name_warnings.iter().cloned());
    rec.count("names", inputs.names.len());
    rec.count("groups", inputs.names.groups().len());
    rec.count("descriptors", inputs.descriptors.len());
    rec.count("templates", inputs.templates.len());
    let mut out = Vec::new();
    for split in inputs.splits() {
        let (names, descriptors) = inputs.split_parts(split);
        let sentences = expand_sentences(names.names(), descriptors, &inputs.templates)?;
        let path = layout.corpus(split);
        let mut n = 0;
        util::write_atomic(&path, |w| {
            n = write_corpus_jsonl(w, sentences)?;
            Ok(())
        })
        .map_err(io_at(&path))?;
        let s = split.as_str();
        rec.count(format!("{s}.sentences"), n);
        if split == Split::Validation {
            rec.count("validation.names", names.len());
            rec.count("validation.descriptors", descriptors.len());
        }
        out.push(path);
    }
    Ok(out)
}

#[derive(Serialize)]
struct SelectionArtifact<'a> {
    names: usize,
    shortfalls: &'a [stereoprobe::namecluster::Shortfall],
    filled_by_opposite_gender: Vec<String>,
}

fn cluster(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    let need = |what: &str| StageError::Invalid(format!("cluster needs inputs.{what} in the config"));
    let emb = cfg.inputs.embeddings.as_ref().ok_or_else(|| need("embeddings"))?;
    let label_path = cfg.inputs.name_labels.as_ref().ok_or_else(|| need("name_labels"))?;
    let set = load_embeddings(emb)?;
    let labels: BTreeMap<String, GroupKey> = load_names(label_path, LoadMode::Lax)?
        .names
        .names()
        .iter()
        .map(|n| (n.given_name.clone(), n.group_key()))
        .collect();
    let kp = cfg.kmeans_params();
    let (fit, mut clusters) = minibatch_kmeans(&set, &kp)?;
    label_clusters(&mut clusters, &labels);
    let selection = select_group_names(&clusters, &labels, &cfg.select_params())?;
    let names = NameSet::new(selection.names.clone());
    rec.count("records", set.records.len());
    rec.count("clusters", clusters.len());
    rec.count("selected", names.len());
    rec.count("groups", names.groups().len());
    rec.count("shortfalls", selection.shortfalls.len());
    let report = cluster_report(&kp, &fit, &clusters, cfg.cluster.dump_centroids);
    write_json(&layout.clusters(), &report)?;
    write_json(
        &layout.selection(),
        &SelectionArtifact {
            names: names.len(),
            shortfalls: &selection.shortfalls,
            filled_by_opposite_gender: selection.filled_by_opposite_gender.iter().map(GroupKey::label).collect(),
        },
    )?;
    write_bytes(&layout.selected_names(), names.to_csv_string().as_bytes())?;
    Ok(vec![layout.clusters(), layout.selection(), layout.selected_names()])
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FailedSentence {
    pub sentence_id: String,
    pub error: String,
}

fn score(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.scoring.models, Stage::Score, "scoring")?;
    let validation_configured = cfg.inputs.category_map.is_some();
    let mut out = Vec::new();
    for name in &cfg.scoring.models {
        let desc = &cfg.backends[name];
        let backend = desc.build()?;
        let cache_path = layout.score_cache(name);
        let cache = ScoreCache::open(&cache_path)?;
        let opts = ScoreOptions {
            max_in_flight: desc.max_in_flight,
            retry: desc.retry.clone(),
            chunk_size: cfg.scoring.chunk_size,
        };
        let calls_before = backend.request_count();
        let mut splits = vec![Split::Corpus];
        if validation_configured {
            splits.push(Split::Validation);
        }
        for split in splits {
            let corpus_path = layout.corpus(split);
            require(&corpus_path, Stage::Expand)?;
            let scored_path = layout.scored(name, split);
            let mut failed = Vec::new();
            let mut read_error = None;
            let mut scoring_error = None;
            let mut stats = None;
            let written = util::write_atomic(&scored_path, |w| {
                let sentences = stream_jsonl::<Sentence>(&corpus_path, &mut read_error).map_err(io::Error::other)?;
                let result = score_corpus(backend.as_ref(), sentences, &cache, &opts, |o| match o {
                    ScoreOutcome::Scored { scored, .. } => util::write_jsonl_line(w, &scored),
                    ScoreOutcome::Failed { sentence_id, error } => {
                        failed.push(FailedSentence { sentence_id, error });
                        Ok(())
                    }
                });
                match result {
                    Ok(s) => {
                        stats = Some(s);
                        Ok(())
                    }
                    Err(e) => {
                        scoring_error = Some(e);
                        Err(io::Error::other("scoring aborted"))
                    }
                }
            });
            cache.flush().map_err(io_at(&cache_path))?;
            if let Some(e) = scoring_error {
                return Err(e.into());
            }
            written.map_err(io_at(&scored_path))?;
            parked(&corpus_path, read_error)?;
            let stats = stats.expect("scoring finished");
            let failed_path = layout.failed(name, split);
            util::write_atomic(&failed_path, |w| {
                for f in &failed {
                    util::write_jsonl_line(w, f)?;
                }
                Ok(())
            })
            .map_err(io_at(&failed_path))?;
            let s = split.as_str();
            rec.count(format!("{name}.{s}.sentences"), stats.total);
            rec.count(format!("{name}.{s}.scored"), stats.scored);
            rec.count(format!("{name}.{s}.cached"), stats.cached);
            rec.count(format!("{name}.{s}.failed"), stats.failed);
            out.push(scored_path);
            out.push(failed_path);
        }
        rec.count(format!("{name}.backend_calls"), backend.request_count() - calls_before);
    }
    Ok(out)
}

/// Join a corpus with its scored records. Both files are in corpus order;
/// a sentence without a record failed.
pub fn build_ppl_table(
    corpus_path: &Path,
    scored_path: &Path,
    names: &NameSet,
    descriptors: &[Descriptor],
    templates: &[Template],
) -> Result<(PplTable, stereoprobe::apx::CellReport)> {
    require(corpus_path, Stage::Expand)?;
    require(scored_path, Stage::Score)?;
    let groups: Vec<GroupKey> = names.groups().iter().map(|g| g.key()).collect();
    let texts: Vec<String> = descriptors.iter().map(|d| d.text.clone()).collect();
    let ids: Vec<usize> = templates.iter().map(|t| t.id).collect();
    let mut builder = PplTableBuilder::new(groups, texts, ids);
    let mut corpus_err = None;
    let mut scored_err = None;
    {
        let mut scored = stream_jsonl::<ScoredSentence>(scored_path, &mut scored_err)?.peekable();
        for s in stream_jsonl::<Sentence>(corpus_path, &mut corpus_err)? {
            let ppl = match scored.peek() {
                Some(r) if r.sentence_id == s.id => scored.next().map(|r| r.ppl),
                _ => None,
            };
            builder.add(&s, ppl);
        }
        if let Some(extra) = scored.next() {
            return Err(StageError::BadArtifact {
                path: scored_path.to_path_buf(),
                reason: format!(
                    "record for sentence {} does not follow the corpus order; rerun `stereoprobe score`",
                    extra.sentence_id
                ),
            });
        }
    }
    parked(corpus_path, corpus_err)?;
    parked(scored_path, scored_err)?;
    Ok(builder.build())
}

fn write_bias(layout: &Layout, model: &str, split: Split, kind: &str, table: &BiasScoreTable) -> Result<Vec<PathBuf>> {
    let json = layout.bias(model, split, kind, "json");
    let csv = layout.bias(model, split, kind, "csv");
    write_json(&json, table)?;
    write_bytes(&csv, table.to_csv_string().as_bytes())?;
    Ok(vec![json, csv])
}

fn apx(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.scoring.models, Stage::Apx, "scoring")?;
    let inputs = Inputs::load(cfg)?;
    let mut out = Vec::new();
    for name in &cfg.scoring.models {
        for split in inputs.splits() {
            let (names, descriptors) = inputs.split_parts(split);
            let (table, cells) = build_ppl_table(
                &layout.corpus(split),
                &layout.scored(name, split),
                names,
                descriptors,
                &inputs.templates,
            )?;
            let s = split.as_str();
            rec.count(format!("{name}.{s}.cells"), cells.cells);
            rec.count(format!("{name}.{s}.invalid_cells"), cells.invalid_cells);
            rec.count(format!("{name}.{s}.dropped_failures"), cells.dropped_failures);
            rec.count(format!("{name}.{s}.ignored_sentences"), cells.ignored_sentences);
            let ppl = bias_scores(&table, Metric::Ppl)?;
            let apx = bias_scores(&table, cfg.apx_metric())?;
            rec.count(
                format!("{name}.{s}.surfaceable_descriptors"),
                apx.surfaceable_descriptors().len(),
            );
            for (path, value) in [
                (layout.ppl_table(name, split), serde_json::to_value(&table)),
                (layout.cells(name, split), serde_json::to_value(&cells)),
            ] {
                write_json(&path, &value.expect("serializable"))?;
                out.push(path);
            }
            out.extend(write_bias(layout, name, split, "ppl", &ppl)?);
            out.extend(write_bias(layout, name, split, "apx", &apx)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationArtifact {
    pub model_id: String,
    /// Scores under the configured adjustment direction.
    pub configured: ValidationReport,
    /// The same comparison with the opposite adjustment direction.
    pub other_direction: ValidationReport,
}

fn other(d: ApxDirection) -> ApxDirection {
    match d {
        ApxDirection::AsPrinted => ApxDirection::Inverse,
        ApxDirection::Inverse => ApxDirection::AsPrinted,
    }
}

fn validate(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.scoring.models, Stage::Validate, "scoring")?;
    let inputs = Inputs::load(cfg)?;
    let Some(vs) = &inputs.validation else {
        return Err(StageError::Invalid("validate needs inputs.category_map in the config".into()));
    };
    let gold: Vec<GoldLabel> = vs
        .descriptors
        .iter()
        .map(|d| GoldLabel {
            descriptor: d.text.clone(),
            target: d.gold_group.clone().expect("validation descriptors are labeled"),
        })
        .collect();
    rec.count("gold_labels", gold.len());
    let mut out = Vec::new();
    for name in &cfg.scoring.models {
        let table: PplTable = read_json(&layout.ppl_table(name, Split::Validation), Stage::Apx)?;
        let ppl = bias_scores(&table, Metric::Ppl)?;
        let apx = bias_scores(&table, cfg.apx_metric())?;
        let alt = bias_scores(&table, Metric::Apx(other(cfg.apx.direction)))?;
        let cands = Candidates::categories(&ppl, &vs.category_of_ethnicity)?;
        let artifact = ValidationArtifact {
            model_id: cfg.backends[name].model_id.clone(),
            configured: validation_report(&ppl, &apx, &gold, &cands)?,
            other_direction: validation_report(&ppl, &alt, &gold, &cands)?,
        };
        let path = layout.validation(name);
        write_json(&path, &artifact)?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceArtifact {
    pub model_id: String,
    pub metric: String,
    pub params: SurfaceParams,
    /// Standard deviation convention used for the z-scores.
    pub sigma: String,
    pub surfaceable_descriptors: usize,
    pub stereotypes: Vec<SurfacedStereotype>,
}

fn surface(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.scoring.models, Stage::Surface, "scoring")?;
    let kind = match cfg.surface.metric {
        SurfaceMetric::Apx => "apx",
        SurfaceMetric::Ppl => "ppl",
    };
    let params = cfg.surface_params();
    let mut out = Vec::new();
    for name in &cfg.scoring.models {
        let table: BiasScoreTable = read_json(&layout.bias(name, Split::Corpus, kind, "json"), Stage::Apx)?;
        let found = surface_stereotypes(&table, &params)?;
        rec.count(format!("{name}.surfaced"), found.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["descriptor", "group", "score", "zscore"]).map_err(|e| StageError::Invalid(e.to_string()))?;
        for s in &found {
            w.write_record([
                s.descriptor.clone(),
                s.group.clone(),
                s.score.to_string(),
                s.zscore.to_string(),
            ])
            .map_err(|e| StageError::Invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| StageError::Invalid(e.to_string()))?;
        write_bytes(&layout.surfaced_csv(name), &bytes)?;
        let artifact = SurfaceArtifact {
            model_id: cfg.backends[name].model_id.clone(),
            metric: table.metric.label(),
            params: params.clone(),
            sigma: "sample".into(),
            surfaceable_descriptors: table.surfaceable_descriptors().len(),
            stereotypes: found,
        };
        write_json(&layout.surfaced_json(name), &artifact)?;
        out.push(layout.surfaced_csv(name));
        out.push(layout.surfaced_json(name));
    }
    Ok(out)
}

fn generate(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.generation.models, Stage::Generate, "generation")?;
    let inputs = Inputs::load(cfg)?;
    let names = inputs.given_names();
    let groups = inputs.group_of_name();
    let mut out = Vec::new();
    for name in &cfg.generation.models {
        let desc = &cfg.chat_backends[name];
        let backend = desc.build(&groups)?;
        let cache = ProfileCache::open(&layout.profile_cache(name))?;
        let (records, stats) = generate_profiles(backend.as_ref(), &names, &cfg.gen_params(desc), &cache)?;
        let profiles = collect_profiles(&records, &names);
        let responses = layout.responses(name);
        util::write_atomic(&responses, |w| {
            for r in &records {
                let mut v = serde_json::to_value(r).map_err(io::Error::other)?;
                if let Some(obj) = v.as_object_mut() {
                    obj.remove("cached");
                }
                util::write_jsonl_line(w, &v)?;
            }
            Ok(())
        })
        .map_err(io_at(&responses))?;
        let profiles_path = layout.profiles(name);
        util::write_atomic(&profiles_path, |w| {
            for p in &profiles {
                util::write_jsonl_line(w, p)?;
            }
            Ok(())
        })
        .map_err(io_at(&profiles_path))?;
        rec.count(format!("{name}.requests"), stats.requests);
        rec.count(format!("{name}.backend_calls"), stats.backend_calls);
        rec.count(format!("{name}.cached"), stats.cached);
        rec.count(format!("{name}.failed_requests"), stats.failed_requests);
        rec.count(format!("{name}.unparseable_responses"), stats.unparseable_responses);
        rec.count(format!("{name}.profiles"), stats.profiles);
        rec.count(format!("{name}.malformed"), stats.malformed);
        if stats.malformed_alarm {
            rec.notes.push(format!(
                "{name}: {} of {} profiles malformed, above the alarm threshold",
                stats.malformed, stats.profiles
            ));
        }
        out.push(responses);
        out.push(profiles_path);
    }
    Ok(out)
}

fn labeled_profiles(layout: &Layout, model: &str, names: &NameSet, rec: &mut StageRecord) -> Result<LabeledProfiles> {
    let profiles: Vec<CharacterProfile> = read_jsonl_all(&layout.profiles(model), Stage::Generate)?;
    let (data, dropped) = LabeledProfiles::from_names(&profiles, names);
    rec.count(format!("{model}.profiles"), data.profiles.len());
    rec.count(format!("{model}.unmatched_profiles"), dropped);
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyArtifact {
    pub model_id: String,
    pub train_size: usize,
    pub test_size: usize,
    pub params: SvmParams,
    pub results: Vec<TaskResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationArtifact {
    pub model_id: String,
    pub report: EliminationReport,
}

fn analyze(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.generation.models, Stage::Analyze, "generation")?;
    let inputs = Inputs::load(cfg)?;
    let a = &cfg.analysis;
    let params = cfg.svm_params();
    let mut out = Vec::new();
    for name in &cfg.generation.models {
        let data = labeled_profiles(layout, name, &inputs.names, rec)?;
        let split = data.split(a.train_fraction, cfg.stage_seed("split"))?;
        let report = feature_elimination(&data, &split, &a.features, &a.tasks, &params, cfg.stage_seed("svm"))?;
        let model_id = cfg.chat_backends[name].model_id.clone();
        let accuracy = AccuracyArtifact {
            model_id: model_id.clone(),
            train_size: split.train.len(),
            test_size: split.test.len(),
            params: params.clone(),
            results: report.baseline.clone(),
        };
        write_json(&layout.accuracy(name), &accuracy)?;
        write_json(&layout.elimination(name), &EliminationArtifact { model_id, report })?;
        out.push(layout.accuracy(name));
        out.push(layout.elimination(name));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdArtifact {
    pub model_id: String,
    pub top_k: usize,
    pub entries: Vec<JsdShiftEntry>,
}

fn jsd(cfg: &Config, layout: &Layout, rec: &mut StageRecord) -> Result<Vec<PathBuf>> {
    need_models(&cfg.generation.models, Stage::Jsd, "generation")?;
    let inputs = Inputs::load(cfg)?;
    let k = cfg.analysis.jsd_top_k;
    let mut out = Vec::new();
    for name in &cfg.generation.models {
        let data = labeled_profiles(layout, name, &inputs.names, rec)?;
        let mut entries = Vec::new();
        for &f in &cfg.analysis.jsd_features {
            entries.extend(jsd_top_words(&data, f, k)?);
        }
        rec.count(format!("{name}.words"), entries.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| StageError::Invalid(e.to_string());
        w.write_record(["feature", "word", "contribution", "groups"]).map_err(csv_err)?;
        for e in &entries {
            w.write_record([
                e.feature.as_str().to_string(),
                e.word.clone(),
                e.contribution.to_string(),
                e.groups.join("; "),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| StageError::Invalid(e.to_string()))?;
        write_bytes(&layout.jsd_csv(name), &bytes)?;
        let artifact = JsdArtifact {
            model_id: cfg.chat_backends[name].model_id.clone(),
            top_k: k,
            entries,
        };
        write_json(&layout.jsd_json(name), &artifact)?;
        out.push(layout.jsd_csv(name));
        out.push(layout.jsd_json(name));
    }
    Ok(out)
}
