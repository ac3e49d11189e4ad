//! Declarative run configuration, loaded from a TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stereoprobe::apx::{ApxDirection, Metric};
use stereoprobe::evalstats::{SurfaceMethod, SurfaceParams};
use stereoprobe::genharness::{ChatDescriptor, GenParams};
use stereoprobe::namecluster::{KMeansParams, SelectParams};
use stereoprobe::profileanalysis::{FeatureGroup, SvmParams, Task};
use stereoprobe::scoring::{BackendDescriptor, BackendKind};
use stereoprobe::util;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub inputs: Inputs,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub apx: ApxConfig,
    #[serde(default)]
    pub surface: SurfaceConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendDescriptor>,
    #[serde(default)]
    pub chat_backends: BTreeMap<String, ChatDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub names: PathBuf,
    pub descriptors: PathBuf,
    /// One pattern per line; the built-in templates are used when unset.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// `ethnicity,category` map enabling the validation corpus.
    #[serde(default)]
    pub category_map: Option<PathBuf>,
    /// Gold-labeled descriptors; defaults to the labeled rows of `descriptors`.
    #[serde(default)]
    pub validation_descriptors: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// `name,ethnicity,gender` labels for the clustered candidate pool.
    #[serde(default)]
    pub name_labels: Option<PathBuf>,
    /// Accept groups without exactly ten names.
    #[serde(default)]
    pub lax_names: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub batch: usize,
    pub iters: usize,
    pub normalize: bool,
    pub per_group: usize,
    pub min_agreement: f64,
    pub opposite_gender_fill: Vec<String>,
    pub allow_shortfall: bool,
    pub dump_centroids: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let k = KMeansParams::default();
        let s = SelectParams::default();
        Self {
            k: k.k,
            batch: k.batch,
            iters: k.iters,
            normalize: k.normalize,
            per_group: s.per_group,
            min_agreement: s.min_agreement,
            opposite_gender_fill: s.opposite_gender_fill,
            allow_shortfall: s.allow_shortfall,
            dump_centroids: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Keys of `[backends.*]` to score with, in report order.
    pub models: Vec<String>,
    pub chunk_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            chunk_size: 4096,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApxConfig {
    pub direction: ApxDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMetric {
    #[default]
    Apx,
    Ppl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    #[default]
    Zscore,
    Permutation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub alpha: f64,
    pub metric: SurfaceMetric,
    pub method: SurfaceMode,
    pub shuffles: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            metric: SurfaceMetric::Apx,
            method: SurfaceMode::Zscore,
            shuffles: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Keys of `[chat_backends.*]`, in report order.
    pub models: Vec<String>,
    pub repeats: u32,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let g = GenParams::default();
        Self {
            models: Vec::new(),
            repeats: g.repeats,
            temperature: g.temperature,
            batch_size: g.batch_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub train_fraction: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub features: Vec<FeatureGroup>,
    pub tasks: Vec<Task>,
    pub jsd_features: Vec<FeatureGroup>,
    pub jsd_top_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let svm = SvmParams::default();
        Self {
            train_fraction: 0.7,
            lambda: svm.lambda,
            epochs: svm.epochs,
            features: FeatureGroup::ALL.to_vec(),
            tasks: Task::ALL.to_vec(),
            jsd_features: FeatureGroup::ALL.to_vec(),
            jsd_top_k: 10,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub alpha: Option<f64>,
    pub apx_direction: Option<ApxDirection>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })
    }

    /// Read, resolve relative paths against the file's directory, apply
    /// overrides, and validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.out_dir = resolve(base, &self.out_dir);
        let i = &mut self.inputs;
        i.names = resolve(base, &i.names);
        i.descriptors = resolve(base, &i.descriptors);
        for p in [
            &mut i.templates,
            &mut i.category_map,
            &mut i.validation_descriptors,
            &mut i.embeddings,
            &mut i.name_labels,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
        for b in self.backends.values_mut() {
            if let Some(p) = &b.path {
                b.path = Some(resolve(base, p));
            }
        }
    }

    /// `--backend` narrows whichever model list mentions the name.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(alpha) = o.alpha {
            self.surface.alpha = alpha;
        }
        if let Some(d) = o.apx_direction {
            self.apx.direction = d;
        }
        if let Some(name) = &o.backend {
            let scoring = self.backends.contains_key(name);
            let chat = self.chat_backends.contains_key(name);
            if !scoring && !chat {
                return Err(ConfigError::Invalid(format!(
                    "--backend {name:?} is not declared under [backends] or [chat_backends]"
                )));
            }
            if scoring {
                self.scoring.models = vec![name.clone()];
            }
            if chat {
                self.generation.models = vec![name.clone()];
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let i = &self.inputs;
        let required = [("inputs.names", Some(&i.names)), ("inputs.descriptors", Some(&i.descriptors))];
        let optional = [
            ("inputs.templates", i.templates.as_ref()),
            ("inputs.category_map", i.category_map.as_ref()),
            ("inputs.validation_descriptors", i.validation_descriptors.as_ref()),
            ("inputs.embeddings", i.embeddings.as_ref()),
            ("inputs.name_labels", i.name_labels.as_ref()),
        ];
        for (key, p) in required.into_iter().chain(optional) {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{key} = {} does not exist", p.display()));
                }
            }
        }
        for name in &self.scoring.models {
            let Some(b) = self.backends.get(name) else {
                return bad(format!("scoring.models lists {name:?}, which has no [backends.{name}] table"));
            };
            if let Err(e) = b.validate() {
                return bad(format!("backends.{name}: {e}"));
            }
        }
        for name in &self.generation.models {
            let Some(b) = self.chat_backends.get(name) else {
                return bad(format!(
                    "generation.models lists {name:?}, which has no [chat_backends.{name}] table"
                ));
            };
            if let Err(e) = b.validate() {
                return bad(format!("chat_backends.{name}: {e}"));
            }
        }
        for name in self.backends.keys().chain(self.chat_backends.keys()) {
            let safe = !name.is_empty()
                && !name.starts_with('.')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !safe {
                return bad(format!("backend name {name:?} must use only letters, digits, '-', '_' and '.'"));
            }
        }
        for (name, b) in &self.backends {
            if b.kind == BackendKind::HttpCompletions && b.auth_env.as_deref().is_some_and(|v| v.contains(char::is_whitespace)) {
                return bad(format!("backends.{name}.auth_env must be an environment variable name"));
            }
        }
        if !(self.surface.alpha > 0.0 && self.surface.alpha < 0.5) {
            return bad(format!("surface.alpha must lie in (0, 0.5), got {}", self.surface.alpha));
        }
        if self.surface.method == SurfaceMode::Permutation && self.surface.shuffles == 0 {
            return bad("surface.shuffles must be positive".into());
        }
        let a = &self.analysis;
        if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
            return bad(format!("analysis.train_fraction must lie in (0, 1), got {}", a.train_fraction));
        }
        if !(a.lambda > 0.0) || a.epochs == 0 {
            return bad("analysis.lambda must be positive and analysis.epochs at least 1".into());
        }
        if a.features.is_empty() || a.tasks.is_empty() {
            return bad("analysis.features and analysis.tasks must be nonempty".into());
        }
        if self.generation.repeats == 0 || self.generation.batch_size == 0 {
            return bad("generation.repeats and generation.batch_size must be at least 1".into());
        }
        if self.scoring.chunk_size == 0 {
            return bad("scoring.chunk_size must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, after overrides.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        util::sha256_hex(&json)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        util::derive_seed(self.seed, stage)
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        let c = &self.cluster;
        KMeansParams {
            k: c.k,
            batch: c.batch,
            iters: c.iters,
            seed: self.stage_seed("cluster"),
            normalize: c.normalize,
        }
    }

    pub fn select_params(&self) -> SelectParams {
        let c = &self.cluster;
        SelectParams {
            per_group: c.per_group,
            min_agreement: c.min_agreement,
            seed: self.stage_seed("select"),
            opposite_gender_fill: c.opposite_gender_fill.clone(),
            allow_shortfall: c.allow_shortfall,
        }
    }

    pub fn apx_metric(&self) -> Metric {
        Metric::Apx(self.apx.direction)
    }

    pub fn surface_params(&self) -> SurfaceParams {
        SurfaceParams {
            alpha: self.surface.alpha,
            method: match self.surface.method {
                SurfaceMode::Zscore => SurfaceMethod::ZScore,
                SurfaceMode::Permutation => SurfaceMethod::Permutation {
                    shuffles: self.surface.shuffles,
                    seed: self.stage_seed("surface"),
                },
            },
        }
    }

    pub fn gen_params(&self, backend: &ChatDescriptor) -> GenParams {
        GenParams {
            repeats: self.generation.repeats,
            temperature: self.generation.temperature,
            batch_size: self.generation.batch_size,
            max_in_flight: backend.max_in_flight,
            retry: backend.retry.clone(),
        }
    }

    pub fn svm_params(&self) -> SvmParams {
        SvmParams {
            lambda: self.analysis.lambda,
            epochs: self.analysis.epochs,
        }
    }
}
