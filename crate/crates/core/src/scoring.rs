//! Sentence likelihood scoring.
//!
//! A backend turns a sentence into per-token natural-log probabilities; the
//! perplexity of the sentence is `exp(-mean(logprobs))`. Masked models use
//! the same formula over masked-position pseudo-log-likelihoods, and
//! encoder-decoder models over decoder-token log-likelihoods. Which tokens
//! are averaged is decided by the backend (or the dump producer), never here.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Gender, GroupKey, Sentence};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Causal,
    Masked,
    Seq2seq,
}

impl ScoringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::Causal => "causal",
            ScoringMode::Masked => "masked",
            ScoringMode::Seq2seq => "seq2seq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LogprobError {
    #[error("no token log-probabilities")]
    Empty,
    #[error("log-probability {value} at position {index} is positive")]
    Positive { index: usize, value: f64 },
    #[error("log-probability at position {index} is not finite")]
    NonFinite { index: usize },
    #[error("{tokens} tokens but {logprobs} log-probabilities")]
    LengthMismatch { tokens: usize, logprobs: usize },
}

fn check_logprobs(logprobs: &[f64]) -> Result<(), LogprobError> {
    if logprobs.is_empty() {
        return Err(LogprobError::Empty);
    }
    for (index, &value) in logprobs.iter().enumerate() {
        if !value.is_finite() {
            return Err(LogprobError::NonFinite { index });
        }
        if value > 0.0 {
            return Err(LogprobError::Positive { index, value });
        }
    }
    Ok(())
}

/// Perplexity of a token sequence from its natural-log token probabilities.
pub fn ppl_from_logprobs(logprobs: &[f64]) -> Result<f64, LogprobError> {
    check_logprobs(logprobs)?;
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Pseudo-perplexity: entry `i` is `log P(x_i | x with position i masked)`.
pub fn pseudo_ppl_from_masked_logprobs(masked_logprobs: &[f64]) -> Result<f64, LogprobError> {
    ppl_from_logprobs(masked_logprobs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub sentence_id: String,
    pub model_id: String,
    pub mode: ScoringMode,
    pub tokens: Vec<String>,
    #[serde(rename = "logprobs")]
    pub token_logprobs: Vec<f64>,
    pub ppl: f64,
}

impl ScoredSentence {
    pub fn new(
        sentence_id: impl Into<String>,
        model_id: impl Into<String>,
        mode: ScoringMode,
        tokens: Vec<String>,
        token_logprobs: Vec<f64>,
    ) -> Result<Self, LogprobError> {
        if tokens.len() != token_logprobs.len() {
            return Err(LogprobError::LengthMismatch {
                tokens: tokens.len(),
                logprobs: token_logprobs.len(),
            });
        }
        let ppl = match mode {
            ScoringMode::Masked => pseudo_ppl_from_masked_logprobs(&token_logprobs)?,
            ScoringMode::Causal | ScoringMode::Seq2seq => ppl_from_logprobs(&token_logprobs)?,
        };
        Ok(Self {
            sentence_id: sentence_id.into(),
            model_id: model_id.into(),
            mode,
            tokens,
            token_logprobs,
            ppl,
        })
    }
}

/// One record of a log-likelihood dump file. Shared with external dump
/// producers; log-probabilities are natural-log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub sentence_id: String,
    pub model_id: String,
    pub mode: ScoringMode,
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

/// Raw backend output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    /// Retryable: connection problems, timeouts, 429 and 5xx responses.
    #[error("transport error: {0}")]
    Transport(String),
    /// The endpoint will not return echoed token log-probabilities.
    #[error("backend refused the request: {0}")]
    Refused(String),
    #[error("dump has no record for sentence {0}")]
    DumpMissing(String),
    #[error("invalid backend response: {0}")]
    Invalid(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait ScoringBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn mode(&self) -> ScoringMode;
    fn score(&self, sentence: &Sentence) -> Result<TokenScores, BackendError>;
    /// Number of scoring requests made so far (for HTTP backends, network calls).
    fn request_count(&self) -> usize;
}

/// Multiplicative perplexity offset planted by the mock backend. With no
/// descriptor it applies to every sentence of the group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOffset {
    pub ethnicity: String,
    pub gender: Gender,
    #[serde(default)]
    pub descriptor: Option<String>,
    /// Perplexity multiplier (< 1 makes the pairing more likely).
    pub factor: f64,
}

/// Deterministic synthetic backend. Tokens are whitespace-separated words;
/// token `t` of sentence `s` gets `-(1 + 0.5 u)` with `u` a seeded hash
/// uniform of (model id, sentence text, position), then planted offsets are
/// applied as `-ln(factor)` per token and the result is capped at 0.
#[derive(Debug)]
pub struct MockBackend {
    model_id: String,
    mode: ScoringMode,
    seed: u64,
    group_factors: HashMap<GroupKey, f64>,
    pair_factors: HashMap<(GroupKey, String), f64>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(model_id: impl Into<String>, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            mode: ScoringMode::Causal,
            seed,
            group_factors: HashMap::new(),
            pair_factors: HashMap::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_mode(mut self, mode: ScoringMode) -> Self {
        self.mode = mode;
        self
    }

    /// Multiply the perplexity of every sentence of `group` by `factor`.
    pub fn with_group_factor(mut self, group: GroupKey, factor: f64) -> Self {
        self.group_factors.insert(group, factor);
        self
    }

    /// Multiply the perplexity of `group` with `descriptor` by `factor`.
    pub fn with_pair_factor(mut self, group: GroupKey, descriptor: impl Into<String>, factor: f64) -> Self {
        self.pair_factors.insert((group, descriptor.into()), factor);
        self
    }

    pub fn with_offsets(mut self, offsets: &[PlantedOffset]) -> Self {
        for o in offsets {
            let key = GroupKey::new(o.ethnicity.clone(), o.gender);
            match &o.descriptor {
                Some(d) => {
                    self.pair_factors.insert((key, d.clone()), o.factor);
                }
                None => {
                    self.group_factors.insert(key, o.factor);
                }
            }
        }
        self
    }

    fn shift(&self, sentence: &Sentence) -> f64 {
        let key = sentence.group_key();
        let group = self.group_factors.get(&key).copied().unwrap_or(1.0);
        let pair = self
            .pair_factors
            .get(&(key, sentence.descriptor.clone()))
            .copied()
            .unwrap_or(1.0);
        -(group.ln() + pair.ln())
    }
}

impl ScoringBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn mode(&self) -> ScoringMode {
        self.mode
    }

    fn score(&self, sentence: &Sentence) -> Result<TokenScores, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let shift = self.shift(sentence);
        let tokens: Vec<String> = sentence.text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(BackendError::Invalid("empty sentence".into()));
        }
        let logprobs = (0..tokens.len() as u64)
            .map(|t| {
                let u = util::hash_uniform(
                    self.seed,
                    &[self.model_id.as_bytes(), sentence.text.as_bytes(), &t.to_le_bytes()],
                );
                (-(1.0 + 0.5 * u) + shift).min(0.0)
            })
            .collect();
        Ok(TokenScores { tokens, logprobs })
    }

    fn request_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("scoring aborted: {0}")]
    Fatal(BackendError),
    #[error("output error: {0}")]
    Output(#[source] io::Error),
}

/// Serves scores from a precomputed dump. Lines whose top-level object has a
/// `header` key describe the producer and are kept, not scored.
#[derive(Debug)]
pub struct DumpBackend {
    model_id: String,
    mode: ScoringMode,
    records: HashMap<String, DumpRecord>,
    pub headers: Vec<Value>,
    calls: AtomicUsize,
}

impl DumpBackend {
    pub fn load(path: &Path, model_id: Option<&str>) -> Result<Self, ScoringError> {
        let io_err = |source| ScoringError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut records = HashMap::new();
        let mut headers = Vec::new();
        let mut seen_model: Option<String> = model_id.map(str::to_string);
        let mut mode = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| ScoringError::BadRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let value: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if value.get("header").is_some() {
                headers.push(value);
                continue;
            }
            let rec: DumpRecord = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            if rec.tokens.len() != rec.logprobs.len() {
                return Err(bad(format!(
                    "{} tokens but {} logprobs",
                    rec.tokens.len(),
                    rec.logprobs.len()
                )));
            }
            match &seen_model {
                Some(m) if m != &rec.model_id => {
                    return Err(bad(format!("model_id {:?}, expected {m:?}", rec.model_id)))
                }
                None => seen_model = Some(rec.model_id.clone()),
                _ => {}
            }
            match mode {
                Some(m) if m != rec.mode => return Err(bad("mixed scoring modes in one dump".into())),
                _ => mode = Some(rec.mode),
            }
            records.insert(rec.sentence_id.clone(), rec);
        }
        Ok(Self {
            model_id: seen_model.unwrap_or_default(),
            mode: mode.unwrap_or(ScoringMode::Causal),
            records,
            headers,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ScoringBackend for DumpBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn mode(&self) -> ScoringMode {
        self.mode
    }

    fn score(&self, sentence: &Sentence) -> Result<TokenScores, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let rec = self
            .records
            .get(&sentence.id)
            .ok_or_else(|| BackendError::DumpMissing(sentence.id.clone()))?;
        Ok(TokenScores {
            tokens: rec.tokens.clone(),
            logprobs: rec.logprobs.clone(),
        })
    }

    fn request_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Read the bearer token from the named environment variable, if any.
pub(crate) fn auth_header(auth_env: Option<&str>) -> Result<Option<String>, BackendError> {
    match auth_env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(|t| Some(format!("Bearer {t}")))
            .map_err(|_| BackendError::Refused(format!("environment variable {var} is not set"))),
    }
}

/// POST a JSON body, mapping statuses onto retryable and fatal errors.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    endpoint: &str,
    auth: Option<&str>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut req = agent.post(endpoint).header("Content-Type", "application/json");
    if let Some(auth) = auth {
        req = req.header("Authorization", auth);
    }
    let mut resp = req
        .send(body.to_string())
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    match status {
        200..=299 => serde_json::from_str(&text)
            .map_err(|e| BackendError::Invalid(format!("response is not JSON: {e}"))),
        429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}: {text}"))),
        _ => Err(BackendError::Refused(format!("HTTP {status}: {text}"))),
    }
}

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

/// Completions endpoint that echoes the prompt with per-token
/// log-probabilities. Tokens without a log-probability (the first one) are
/// skipped.
pub struct HttpCompletionsBackend {
    endpoint: String,
    model_id: String,
    auth_env: Option<String>,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

impl HttpCompletionsBackend {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, auth_env: Option<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            auth_env,
            agent: http_agent(timeout),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn request_body(&self, text: &str) -> Value {
        json!({
            "model": self.model_id,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0,
        })
    }
}

/// Extract echoed tokens and their log-probabilities from a completions
/// response, skipping tokens with a null log-probability.
pub fn parse_completions_logprobs(resp: &Value) -> Result<TokenScores, BackendError> {
    let lp = resp
        .pointer("/choices/0/logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| BackendError::Refused("response carries no logprobs (echo unsupported?)".into()))?;
    let tokens = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Invalid("logprobs.tokens missing".into()))?;
    let values = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Invalid("logprobs.token_logprobs missing".into()))?;
    if tokens.len() != values.len() {
        return Err(BackendError::Invalid("tokens and token_logprobs differ in length".into()));
    }
    let mut out = TokenScores {
        tokens: Vec::new(),
        logprobs: Vec::new(),
    };
    for (tok, val) in tokens.iter().zip(values) {
        if val.is_null() {
            continue;
        }
        let tok = tok
            .as_str()
            .ok_or_else(|| BackendError::Invalid("non-string token".into()))?;
        let val = val
            .as_f64()
            .ok_or_else(|| BackendError::Invalid("non-numeric logprob".into()))?;
        out.tokens.push(tok.to_string());
        out.logprobs.push(val);
    }
    Ok(out)
}

impl ScoringBackend for HttpCompletionsBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn mode(&self) -> ScoringMode {
        ScoringMode::Causal
    }

    fn score(&self, sentence: &Sentence) -> Result<TokenScores, BackendError> {
        let auth = auth_header(self.auth_env.as_deref())?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let resp = post_json(&self.agent, &self.endpoint, auth.as_deref(), &self.request_body(&sentence.text))?;
        parse_completions_logprobs(&resp)
    }

    fn request_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpCompletions,
    DumpFile,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }

    /// Run `op`, retrying retryable errors with exponential backoff.
    pub fn run<T, F>(&self, mut op: F) -> Result<T, BackendError>
    where
        F: FnMut() -> Result<T, BackendError>,
    {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    60
}

/// Declarative description of a scoring backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Name of the environment variable holding the API token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Mock only.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<ScoringMode>,
    #[serde(default)]
    pub planted: Vec<PlantedOffset>,
}

impl BackendDescriptor {
    pub fn mock(model_id: impl Into<String>, seed: u64) -> Self {
        Self {
            kind: BackendKind::Mock,
            model_id: model_id.into(),
            endpoint: None,
            path: None,
            auth_env: None,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
            seed,
            mode: None,
            planted: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        match self.kind {
            BackendKind::HttpCompletions => {
                if self.endpoint.as_deref().unwrap_or("").is_empty() || self.model_id.is_empty() {
                    return Err(ScoringError::Config(
                        "http_completions backends need an endpoint and a model_id".into(),
                    ));
                }
            }
            BackendKind::DumpFile => match &self.path {
                Some(p) if p.exists() => {}
                Some(p) => return Err(ScoringError::Config(format!("dump file {} does not exist", p.display()))),
                None => return Err(ScoringError::Config("dump_file backends need a path".into())),
            },
            BackendKind::Mock => {
                if self.model_id.is_empty() {
                    return Err(ScoringError::Config("mock backends need a model_id".into()));
                }
            }
        }
        if self.max_in_flight == 0 {
            return Err(ScoringError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn ScoringBackend>, ScoringError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Box::new(
                MockBackend::new(self.model_id.clone(), self.seed)
                    .with_mode(self.mode.unwrap_or(ScoringMode::Causal))
                    .with_offsets(&self.planted),
            ),
            BackendKind::DumpFile => {
                let path = self.path.as_ref().expect("validated");
                let model = (!self.model_id.is_empty()).then_some(self.model_id.as_str());
                Box::new(DumpBackend::load(path, model)?)
            }
            BackendKind::HttpCompletions => Box::new(HttpCompletionsBackend::new(
                self.endpoint.clone().expect("validated"),
                self.model_id.clone(),
                self.auth_env.clone(),
                Duration::from_secs(self.timeout_secs),
            )),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: ScoredSentence,
}

/// Append-only JSONL score cache keyed by a content hash of
/// (model id, mode, sentence text).
pub struct ScoreCache {
    entries: Mutex<HashMap<String, ScoredSentence>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Open (or create) a cache file, loading existing entries. A truncated
    /// final line from an interrupted run is ignored.
    pub fn open(path: &Path) -> Result<Self, ScoringError> {
        let io_err = |source| ScoringError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for line in reader.lines() {
                let line = line.map_err(io_err)?;
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.value);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        Ok(Self {
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn key(model_id: &str, mode: ScoringMode, text: &str) -> String {
        util::content_hash([model_id, mode.as_str(), text])
    }

    pub fn get(&self, key: &str) -> Option<ScoredSentence> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: String, value: ScoredSentence) -> io::Result<()> {
        if let Some(w) = self.writer.lock().expect("cache lock").as_mut() {
            util::write_jsonl_line(
                w,
                &CacheLine {
                    key: key.clone(),
                    value: value.clone(),
                },
            )?;
        }
        self.entries.lock().expect("cache lock").insert(key, value);
        Ok(())
    }

    pub fn flush(&self) -> io::Result<()> {
        if let Some(w) = self.writer.lock().expect("cache lock").as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Sentences pulled from the input per scheduling round.
    pub chunk_size: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            chunk_size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOutcome {
    Scored { scored: ScoredSentence, cached: bool },
    Failed { sentence_id: String, error: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub total: usize,
    /// Newly scored by the backend in this run.
    pub scored: usize,
    pub cached: usize,
    pub failed: usize,
    pub failed_ids: Vec<String>,
}

/// Score a stream of sentences. Cache hits are served without touching the
/// backend; misses are scored by up to `max_in_flight` workers. Outcomes are
/// handed to `sink` in input order, whatever order requests complete in, so
/// the sink output is identical across interleavings.
pub fn score_corpus<I, F>(
    backend: &dyn ScoringBackend,
    sentences: I,
    cache: &ScoreCache,
    opts: &ScoreOptions,
    mut sink: F,
) -> Result<ScoreStats, ScoringError>
where
    I: IntoIterator<Item = Sentence>,
    F: FnMut(ScoreOutcome) -> io::Result<()>,
{
    let mut stats = ScoreStats::default();
    let mut iter = sentences.into_iter().peekable();
    let workers = opts.max_in_flight.max(1);
    while iter.peek().is_some() {
        let chunk: Vec<Sentence> = iter.by_ref().take(opts.chunk_size.max(1)).collect();
        let keys: Vec<String> = chunk
            .iter()
            .map(|s| ScoreCache::key(backend.model_id(), backend.mode(), &s.text))
            .collect();
        let mut slots: Vec<Option<ScoreOutcome>> = keys
            .iter()
            .zip(&chunk)
            .map(|(k, s)| {
                cache.get(k).map(|mut scored| {
                    scored.sentence_id = s.id.clone();
                    ScoreOutcome::Scored { scored, cached: true }
                })
            })
            .collect();
        let misses: Vec<usize> = (0..chunk.len()).filter(|&i| slots[i].is_none()).collect();

        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<ScoredSentence, BackendError>)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..workers.min(misses.len()) {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = misses.get(j) else { break };
                    let sentence = &chunk[i];
                    let result = opts.retry.run(|| backend.score(sentence)).and_then(|ts| {
                        ScoredSentence::new(
                            sentence.id.clone(),
                            backend.model_id(),
                            backend.mode(),
                            ts.tokens,
                            ts.logprobs,
                        )
                        .map_err(|e| BackendError::Invalid(e.to_string()))
                    });
                    let fatal = matches!(result, Err(BackendError::Refused(_)));
                    results.lock().expect("results lock").push((i, result));
                    if fatal {
                        // stop handing out work; other workers drain naturally
                        next.store(misses.len(), Ordering::Relaxed);
                        break;
                    }
                });
            }
        });

        let mut results = results.into_inner().expect("results lock");
        results.sort_by_key(|(i, _)| *i);
        if let Some((_, Err(e))) = results.iter().find(|(_, r)| matches!(r, Err(BackendError::Refused(_)))) {
            cache.flush().map_err(ScoringError::Output)?;
            return Err(ScoringError::Fatal(e.clone()));
        }
        for (i, result) in results {
            slots[i] = Some(match result {
                Ok(scored) => {
                    cache.put(keys[i].clone(), scored.clone()).map_err(ScoringError::Output)?;
                    ScoreOutcome::Scored { scored, cached: false }
                }
                Err(e) => ScoreOutcome::Failed {
                    sentence_id: chunk[i].id.clone(),
                    error: e.to_string(),
                },
            });
        }
        cache.flush().map_err(ScoringError::Output)?;

        for outcome in slots.into_iter().map(|s| s.expect("every slot filled")) {
            stats.total += 1;
            match &outcome {
                ScoreOutcome::Scored { cached: true, .. } => stats.cached += 1,
                ScoreOutcome::Scored { cached: false, .. } => stats.scored += 1,
                ScoreOutcome::Failed { sentence_id, .. } => {
                    stats.failed += 1;
                    stats.failed_ids.push(sentence_id.clone());
                }
            }
            sink(outcome).map_err(ScoringError::Output)?;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_templates, expand_sentences, Descriptor, DescriptorSource, NameEntry};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn ppl_examples() {
        assert!(close(ppl_from_logprobs(&[-LN_2, -LN_2]).unwrap(), 2.0));
        assert_eq!(ppl_from_logprobs(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        // exp(ln 4 / 2) = 2
        assert!(close(ppl_from_logprobs(&[0.0, -(4.0f64).ln()]).unwrap(), 2.0));
    }

    #[test]
    fn pseudo_ppl_examples() {
        assert!(close(pseudo_ppl_from_masked_logprobs(&[-LN_2, -LN_2]).unwrap(), 2.0));
        assert!(close(pseudo_ppl_from_masked_logprobs(&[-(10.0f64).ln()]).unwrap(), 10.0));
        let xs = [-0.3, -1.7, -0.01];
        assert_eq!(
            pseudo_ppl_from_masked_logprobs(&xs).unwrap(),
            ppl_from_logprobs(&xs).unwrap()
        );
    }

    #[test]
    fn ppl_errors() {
        assert_eq!(ppl_from_logprobs(&[]), Err(LogprobError::Empty));
        assert!(matches!(ppl_from_logprobs(&[-1.0, 0.5]), Err(LogprobError::Positive { index: 1, .. })));
        assert!(matches!(ppl_from_logprobs(&[f64::NAN]), Err(LogprobError::NonFinite { index: 0 })));
        assert!(matches!(
            ppl_from_logprobs(&[f64::NEG_INFINITY]),
            Err(LogprobError::NonFinite { index: 0 })
        ));
        assert!(ScoredSentence::new("s", "m", ScoringMode::Causal, vec!["a".into()], vec![-1.0, -1.0]).is_err());
    }

    fn logprob_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..=0.0, 1..30)
    }

    proptest! {
        #[test]
        fn ppl_at_least_one(xs in logprob_vec()) {
            prop_assert!(ppl_from_logprobs(&xs).unwrap() >= 1.0);
        }

        #[test]
        fn ppl_permutation_invariant(xs in logprob_vec()) {
            let mut rev = xs.clone();
            rev.reverse();
            let a = ppl_from_logprobs(&xs).unwrap();
            let b = ppl_from_logprobs(&rev).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }

        #[test]
        fn ppl_strictly_decreasing_in_each_entry(xs in logprob_vec(), pos in 0usize..30, bump in 0.01f64..1.0) {
            let i = pos % xs.len();
            let mut lower = xs.clone();
            lower[i] -= bump;
            prop_assert!(ppl_from_logprobs(&lower).unwrap() > ppl_from_logprobs(&xs).unwrap());
        }

        #[test]
        fn appending_the_mean_keeps_ppl(xs in logprob_vec()) {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let mut ext = xs.clone();
            ext.push(mean);
            let a = ppl_from_logprobs(&xs).unwrap();
            let b = ppl_from_logprobs(&ext).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }

        #[test]
        fn scored_sentence_json_round_trip(xs in logprob_vec()) {
            let tokens = (0..xs.len()).map(|i| format!("t{i}")).collect();
            let s = ScoredSentence::new("id", "model", ScoringMode::Masked, tokens, xs).unwrap();
            let back: ScoredSentence = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    fn six_sentences() -> Vec<Sentence> {
        let names = vec![
            NameEntry::new("Kazuyo", "Japanese", Gender::F).unwrap(),
            NameEntry::new("Hiroshi", "Japanese", Gender::M).unwrap(),
        ];
        let ds: Vec<Descriptor> = ["shy", "quiet", "tall"]
            .iter()
            .map(|t| Descriptor {
                text: t.to_string(),
                source: DescriptorSource::Other,
                axis: None,
                gold_group: None,
            })
            .collect();
        let ts = vec![default_templates().remove(0)];
        expand_sentences(&names, &ds, &ts).unwrap().collect()
    }

    #[test]
    fn mock_is_deterministic_and_in_range() {
        let a = MockBackend::new("m", 1);
        let b = MockBackend::new("m", 1);
        let c = MockBackend::new("m", 2);
        let s = &six_sentences()[0];
        let sa = a.score(s).unwrap();
        assert_eq!(sa, b.score(s).unwrap());
        assert_ne!(sa.logprobs, c.score(s).unwrap().logprobs);
        assert_eq!(sa.tokens, vec!["Kazuyo", "is", "shy."]);
        assert!(sa.logprobs.iter().all(|&l| (-1.5..=-1.0).contains(&l)));
    }

    #[test]
    fn mock_planted_factor_scales_ppl() {
        let s = &six_sentences()[0];
        let plain = MockBackend::new("m", 1);
        let planted = MockBackend::new("m", 1).with_pair_factor(s.group_key(), "shy", 0.5);
        let p0 = ppl_from_logprobs(&plain.score(s).unwrap().logprobs).unwrap();
        let p1 = ppl_from_logprobs(&planted.score(s).unwrap().logprobs).unwrap();
        assert!((p1 / p0 - 0.5).abs() < 1e-12);
        let grouped = MockBackend::new("m", 1).with_group_factor(s.group_key(), 3.0);
        let p2 = ppl_from_logprobs(&grouped.score(s).unwrap().logprobs).unwrap();
        assert!((p2 / p0 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mock_corpus_then_full_cache_hits() {
        let backend = MockBackend::new("m", 7);
        let cache = ScoreCache::in_memory();
        let mut out = Vec::new();
        let stats = score_corpus(&backend, six_sentences(), &cache, &ScoreOptions::default(), |o| {
            out.push(o);
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.total, 6);
        assert_eq!(stats.scored, 6);
        assert_eq!(backend.request_count(), 6);

        let mut again = Vec::new();
        let stats = score_corpus(&backend, six_sentences(), &cache, &ScoreOptions::default(), |o| {
            again.push(o);
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.cached, 6);
        assert_eq!(backend.request_count(), 6);
        let strip = |v: Vec<ScoreOutcome>| {
            v.into_iter()
                .map(|o| match o {
                    ScoreOutcome::Scored { scored, .. } => scored,
                    ScoreOutcome::Failed { .. } => panic!("unexpected failure"),
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(out), strip(again));
    }

    #[test]
    fn output_order_is_input_order_for_any_worker_count() {
        let sentences = six_sentences();
        let ids: Vec<String> = sentences.iter().map(|s| s.id.clone()).collect();
        for workers in [1, 2, 5] {
            let backend = MockBackend::new("m", 7);
            let opts = ScoreOptions {
                max_in_flight: workers,
                chunk_size: 4,
                ..Default::default()
            };
            let mut got = Vec::new();
            score_corpus(&backend, sentences.clone(), &ScoreCache::in_memory(), &opts, |o| {
                if let ScoreOutcome::Scored { scored, .. } = o {
                    got.push(scored.sentence_id);
                }
                Ok(())
            })
            .unwrap();
            assert_eq!(got, ids);
        }
    }

    #[test]
    fn file_cache_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let backend = MockBackend::new("m", 3);
        let mut first = Vec::new();
        {
            let cache = ScoreCache::open(&path).unwrap();
            score_corpus(&backend, six_sentences(), &cache, &ScoreOptions::default(), |o| {
                first.push(o);
                Ok(())
            })
            .unwrap();
        }
        let cache = ScoreCache::open(&path).unwrap();
        assert_eq!(cache.len(), 6);
        for o in first {
            let ScoreOutcome::Scored { scored, .. } = o else { panic!() };
            let s = six_sentences().into_iter().find(|s| s.id == scored.sentence_id).unwrap();
            let hit = cache.get(&ScoreCache::key("m", ScoringMode::Causal, &s.text)).unwrap();
            assert_eq!(hit, scored);
            for (a, b) in hit.token_logprobs.iter().zip(&scored.token_logprobs) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn dump_backend_serves_and_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        let sentences = six_sentences();
        let mut body = String::from("{\"header\":{\"first_token\":\"bos\"}}\n");
        for s in &sentences[..5] {
            let rec = DumpRecord {
                sentence_id: s.id.clone(),
                model_id: "toy".into(),
                mode: ScoringMode::Masked,
                tokens: vec!["a".into(), "b".into()],
                logprobs: vec![-LN_2, -LN_2],
            };
            body.push_str(&serde_json::to_string(&rec).unwrap());
            body.push('\n');
        }
        std::fs::write(&path, body).unwrap();
        let backend = DumpBackend::load(&path, None).unwrap();
        assert_eq!(backend.len(), 5);
        assert_eq!(backend.headers.len(), 1);
        assert_eq!(backend.mode(), ScoringMode::Masked);
        let mut outcomes = Vec::new();
        let stats = score_corpus(&backend, sentences, &ScoreCache::in_memory(), &ScoreOptions::default(), |o| {
            outcomes.push(o);
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.scored, 5);
        assert_eq!(stats.failed, 1);
        let ScoreOutcome::Scored { scored, .. } = &outcomes[0] else { panic!() };
        assert!(close(scored.ppl, 2.0));
        assert!(matches!(outcomes[5], ScoreOutcome::Failed { .. }));
    }

    #[test]
    fn dump_rejects_model_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        std::fs::write(
            &path,
            "{\"sentence_id\":\"a\",\"model_id\":\"x\",\"mode\":\"causal\",\"tokens\":[\"a\"],\"logprobs\":[-1.0]}\n",
        )
        .unwrap();
        assert!(DumpBackend::load(&path, Some("y")).is_err());
        assert!(DumpBackend::load(&path, Some("x")).is_ok());
    }

    #[test]
    fn completions_response_parsing() {
        let resp = json!({"choices": [{"logprobs": {
            "tokens": ["Kaz", "uyo", " is", " shy"],
            "token_logprobs": [null, -2.0, -0.5, -1.0]
        }}]});
        let ts = parse_completions_logprobs(&resp).unwrap();
        assert_eq!(ts.tokens, vec!["uyo", " is", " shy"]);
        assert_eq!(ts.logprobs, vec![-2.0, -0.5, -1.0]);
        let refused = json!({"choices": [{"text": "x", "logprobs": null}]});
        assert!(matches!(parse_completions_logprobs(&refused), Err(BackendError::Refused(_))));
    }

    #[test]
    fn descriptor_validation() {
        let mut d = BackendDescriptor::mock("m", 0);
        assert!(d.validate().is_ok());
        d.kind = BackendKind::HttpCompletions;
        assert!(d.validate().is_err());
        d.endpoint = Some("http://localhost:1/v1/completions".into());
        assert!(d.validate().is_ok());
        d.kind = BackendKind::DumpFile;
        d.path = Some("/nonexistent/dump.jsonl".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn retry_policy_backoff() {
        let p = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 1,
            max_delay_ms: 4,
        };
        assert_eq!(p.delay(0), Duration::from_millis(1));
        assert_eq!(p.delay(5), Duration::from_millis(4));
        let mut n = 0;
        let r: Result<(), _> = p.run(|| {
            n += 1;
            Err(BackendError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(n, 4);
        let mut n = 0;
        let r: Result<(), _> = p.run(|| {
            n += 1;
            Err(BackendError::Refused("no".into()))
        });
        assert!(r.is_err());
        assert_eq!(n, 1);
    }
}
