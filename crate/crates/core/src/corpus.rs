//! Names, descriptors and templates, and their expansion into the probe
//! sentence corpus.
//!
//! Every probe sentence is one template realized with one given name and one
//! descriptor. Expansion is lazy, so the full cross product never has to be
//! held in memory.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::util;

pub const NAME_PLACEHOLDER: &str = "{name}";
pub const DESCRIPTOR_PLACEHOLDER: &str = "{descriptor}";

/// Allowed length of a given name, in characters.
pub const MIN_NAME_CHARS: usize = 2;
pub const MAX_NAME_CHARS: usize = 14;

/// Names per group in a full-shape corpus.
pub const NAMES_PER_GROUP: usize = 10;

/// Toolkit-invented declarative templates used when no template file is
/// given. They are not taken from any published template set.
pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "{name} is {descriptor}.",
    "My friend {name} is {descriptor}.",
    "I think {name} is {descriptor}.",
];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("{path}: {} rows rejected (first: row {}: {})", .rejected.len(), .rejected[0].row, .rejected[0].reason)]
    RejectedRows {
        path: PathBuf,
        rejected: Vec<RowDiagnostic>,
    },
    #[error("group shape violation: {0}")]
    GroupShape(String),
    #[error("invalid template {pattern:?}: {reason}")]
    InvalidTemplate { pattern: String, reason: String },
    #[error("cannot expand an empty {0} set")]
    EmptyInput(&'static str),
    #[error("category map: {0}")]
    CategoryMap(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Gender::F => "Female",
            Gender::M => "Male",
        }
    }

    pub fn opposite(self) -> Gender {
        match self {
            Gender::F => Gender::M,
            Gender::M => Gender::F,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            other => Err(format!("gender must be F or M, got {other:?}")),
        }
    }
}

/// An (ethnicity, gender) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub ethnicity: String,
    pub gender: Gender,
}

impl GroupKey {
    pub fn new(ethnicity: impl Into<String>, gender: Gender) -> Self {
        Self {
            ethnicity: ethnicity.into(),
            gender,
        }
    }

    /// Human-readable label, e.g. `Chinese Female`.
    pub fn label(&self) -> String {
        format!("{} {}", self.ethnicity, self.gender.long_name())
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.ethnicity, self.gender.long_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NameEntry {
    pub given_name: String,
    pub ethnicity: String,
    pub gender: Gender,
}

impl NameEntry {
    /// Validates the name-length invariant.
    pub fn new(
        given_name: impl Into<String>,
        ethnicity: impl Into<String>,
        gender: Gender,
    ) -> std::result::Result<Self, String> {
        let given_name = given_name.into();
        let ethnicity = ethnicity.into();
        let chars = given_name.chars().count();
        if !(MIN_NAME_CHARS..=MAX_NAME_CHARS).contains(&chars) {
            return Err(format!(
                "name {given_name:?} has {chars} characters, allowed {MIN_NAME_CHARS}..={MAX_NAME_CHARS}"
            ));
        }
        if ethnicity.trim().is_empty() {
            return Err("empty ethnicity".into());
        }
        Ok(Self {
            given_name,
            ethnicity,
            gender,
        })
    }

    pub fn group_key(&self) -> GroupKey {
        GroupKey::new(self.ethnicity.clone(), self.gender)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: usize,
    pub ethnicity: String,
    pub gender: Gender,
}

impl Group {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(self.ethnicity.clone(), self.gender)
    }

    pub fn label(&self) -> String {
        self.key().label()
    }
}

/// A validated name set with its groups. Group ids follow the sorted
/// (ethnicity, gender) order, so they do not depend on row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameSet {
    names: Vec<NameEntry>,
    groups: Vec<Group>,
    group_index: HashMap<GroupKey, usize>,
}

impl NameSet {
    pub fn new(names: Vec<NameEntry>) -> Self {
        let keys: BTreeSet<GroupKey> = names.iter().map(NameEntry::group_key).collect();
        let groups: Vec<Group> = keys
            .into_iter()
            .enumerate()
            .map(|(id, key)| Group {
                id,
                ethnicity: key.ethnicity,
                gender: key.gender,
            })
            .collect();
        let group_index = groups.iter().map(|g| (g.key(), g.id)).collect();
        Self {
            names,
            groups,
            group_index,
        }
    }

    pub fn names(&self) -> &[NameEntry] {
        &self.names
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn group_id(&self, key: &GroupKey) -> Option<usize> {
        self.group_index.get(key).copied()
    }

    pub fn group_of(&self, name: &NameEntry) -> Option<usize> {
        self.group_id(&name.group_key())
    }

    pub fn ethnicities(&self) -> BTreeSet<&str> {
        self.groups.iter().map(|g| g.ethnicity.as_str()).collect()
    }

    /// Names per group, indexed by group id.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.groups.len()];
        for name in &self.names {
            if let Some(id) = self.group_of(name) {
                counts[id] += 1;
            }
        }
        counts
    }

    pub fn members(&self, group_id: usize) -> impl Iterator<Item = &NameEntry> + '_ {
        let key = self.groups[group_id].key();
        self.names.iter().filter(move |n| n.group_key() == key)
    }

    /// Keep only names whose ethnicity satisfies the predicate.
    pub fn filter_ethnicities<F: Fn(&str) -> bool>(&self, keep: F) -> NameSet {
        NameSet::new(
            self.names
                .iter()
                .filter(|n| keep(&n.ethnicity))
                .cloned()
                .collect(),
        )
    }

    /// Canonical CSV serialization (`name,ethnicity,gender`).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("name,ethnicity,gender\n");
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for n in &self.names {
            wtr.write_record([&n.given_name, &n.ethnicity, n.gender.as_str()])
                .expect("in-memory csv write");
        }
        out.push_str(&String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8"));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Every group must have exactly `NAMES_PER_GROUP` names and no row may be rejected.
    #[default]
    Strict,
    /// Arbitrary group shapes; shape problems become warnings.
    Lax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct NameLoad {
    pub names: NameSet,
    pub rejected: Vec<RowDiagnostic>,
    pub warnings: Vec<String>,
}

impl NameLoad {
    /// One line per group: `label: count`.
    pub fn group_report(&self) -> Vec<String> {
        let counts = self.names.group_counts();
        self.names
            .groups()
            .iter()
            .map(|g| format!("{}: {}", g.label(), counts[g.id]))
            .collect()
    }
}

fn io_err(path: &Path, source: io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header_positions(
    path: &Path,
    rdr: &mut csv::Reader<std::fs::File>,
) -> Result<HashMap<String, usize>> {
    let headers = rdr.headers().map_err(|source| CorpusError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
        .collect())
}

fn require_column(path: &Path, cols: &HashMap<String, usize>, name: &str) -> Result<usize> {
    cols.get(name)
        .copied()
        .ok_or_else(|| CorpusError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

/// Load `name,ethnicity,gender` rows.
///
/// Rows that violate the name invariants are collected as diagnostics; in
/// strict mode any rejection, or any group without exactly ten names, fails
/// the load.
pub fn load_names(path: &Path, mode: LoadMode) -> Result<NameLoad> {
    let mut rdr = csv_reader(path)?;
    let cols = header_positions(path, &mut rdr)?;
    let name_col = require_column(path, &cols, "name")?;
    let eth_col = require_column(path, &cols, "ethnicity")?;
    let gender_col = require_column(path, &cols, "gender")?;

    let mut names = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|source| CorpusError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |i: usize| record.get(i).unwrap_or("");
        if record.len() <= name_col.max(eth_col).max(gender_col) {
            return Err(CorpusError::MalformedRow {
                path: path.to_path_buf(),
                row,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let entry = field(gender_col)
            .parse::<Gender>()
            .and_then(|g| NameEntry::new(field(name_col), field(eth_col), g));
        match entry {
            Ok(entry) => {
                if seen.insert(entry.clone()) {
                    names.push(entry);
                } else {
                    rejected.push(RowDiagnostic {
                        row,
                        reason: format!("duplicate row for {:?}", entry.given_name),
                    });
                }
            }
            Err(reason) => rejected.push(RowDiagnostic { row, reason }),
        }
    }

    let names = NameSet::new(names);
    let mut warnings = Vec::new();
    let counts = names.group_counts();
    for g in names.groups() {
        if counts[g.id] != NAMES_PER_GROUP {
            warnings.push(format!(
                "group {} has {} names, expected {NAMES_PER_GROUP}",
                g.label(),
                counts[g.id]
            ));
        }
    }
    if mode == LoadMode::Strict {
        if !rejected.is_empty() {
            return Err(CorpusError::RejectedRows {
                path: path.to_path_buf(),
                rejected,
            });
        }
        if !warnings.is_empty() {
            return Err(CorpusError::GroupShape(warnings.join("; ")));
        }
    }
    Ok(NameLoad {
        names,
        rejected,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorSource {
    Holisticbias,
    Ghavami,
    Stereoset,
    Other,
}

impl FromStr for DescriptorSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "holisticbias" => Ok(Self::Holisticbias),
            "ghavami" => Ok(Self::Ghavami),
            "stereoset" => Ok(Self::Stereoset),
            "other" => Ok(Self::Other),
            other => Err(format!("unknown descriptor source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub text: String,
    pub source: DescriptorSource,
    pub axis: Option<String>,
    /// Gold group or racial-category label, only on validation descriptors.
    pub gold_group: Option<String>,
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Load `descriptor,source,axis,gold_group` rows (the last two columns are
/// optional). Duplicate descriptor texts are dropped, keeping the first.
/// Matching is exact and case-sensitive.
pub fn load_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    let mut rdr = csv_reader(path)?;
    let cols = header_positions(path, &mut rdr)?;
    let text_col = require_column(path, &cols, "descriptor")?;
    let source_col = require_column(path, &cols, "source")?;
    let axis_col = cols.get("axis").copied();
    let gold_col = cols.get("gold_group").copied();

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|source| CorpusError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let malformed = |reason: String| CorpusError::MalformedRow {
            path: path.to_path_buf(),
            row,
            reason,
        };
        let text = record.get(text_col).unwrap_or("").trim();
        if text.is_empty() {
            return Err(malformed("empty descriptor text".into()));
        }
        let source = record
            .get(source_col)
            .unwrap_or("")
            .parse::<DescriptorSource>()
            .map_err(malformed)?;
        let axis = axis_col.and_then(|c| record.get(c)).and_then(non_empty);
        let gold_group = gold_col.and_then(|c| record.get(c)).and_then(non_empty);
        if seen.insert(text.to_string()) {
            out.push(Descriptor {
                text: text.to_string(),
                source,
                axis,
                gold_group,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub pattern: String,
}

impl Template {
    pub fn new(id: usize, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        for placeholder in [NAME_PLACEHOLDER, DESCRIPTOR_PLACEHOLDER] {
            let count = pattern.matches(placeholder).count();
            if count != 1 {
                return Err(CorpusError::InvalidTemplate {
                    pattern,
                    reason: format!("expected exactly one {placeholder}, found {count}"),
                });
            }
        }
        Ok(Self { id, pattern })
    }

    pub fn realize(&self, name: &str, descriptor: &str) -> String {
        // Substitute the name first, then the descriptor in the remaining
        // pattern, so neither value is re-scanned for placeholders.
        let (before, after) = self
            .pattern
            .split_once(NAME_PLACEHOLDER)
            .expect("validated template");
        let fill = |s: &str| s.replacen(DESCRIPTOR_PLACEHOLDER, descriptor, 1);
        if before.contains(DESCRIPTOR_PLACEHOLDER) {
            format!("{}{name}{after}", fill(before))
        } else {
            format!("{before}{name}{}", fill(after))
        }
    }
}

pub fn default_templates() -> Vec<Template> {
    DEFAULT_TEMPLATES
        .iter()
        .enumerate()
        .map(|(i, p)| Template::new(i, *p).expect("default templates are valid"))
        .collect()
}

/// One pattern per line; blank lines and `#` comments are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(id, line)| Template::new(id, line))
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_templates(&text)
}

/// A realized probe sentence; also the canonical JSONL corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub name: String,
    pub ethnicity: String,
    pub gender: Gender,
    pub descriptor: String,
    pub template: usize,
}

impl Sentence {
    pub fn group_key(&self) -> GroupKey {
        GroupKey::new(self.ethnicity.clone(), self.gender)
    }
}

/// Deterministic sentence id: truncated SHA-256 over the identifying fields.
pub fn sentence_id(name: &NameEntry, descriptor: &str, template: usize) -> String {
    let template = template.to_string();
    let mut id = util::content_hash([
        name.given_name.as_str(),
        name.ethnicity.as_str(),
        name.gender.as_str(),
        descriptor,
        template.as_str(),
    ]);
    id.truncate(32);
    id
}

/// Lazy iterator over the name × descriptor × template product, in
/// name-major, then descriptor, then template order.
pub struct SentenceIter<'a> {
    names: &'a [NameEntry],
    descriptors: &'a [Descriptor],
    templates: &'a [Template],
    cursor: usize,
}

impl<'a> Iterator for SentenceIter<'a> {
    type Item = Sentence;

    fn next(&mut self) -> Option<Sentence> {
        let (nd, nt) = (self.descriptors.len(), self.templates.len());
        if self.cursor >= self.names.len() * nd * nt {
            return None;
        }
        let t = self.cursor % nt;
        let d = (self.cursor / nt) % nd;
        let n = self.cursor / (nt * nd);
        self.cursor += 1;

        let name = &self.names[n];
        let descriptor = &self.descriptors[d].text;
        let template = &self.templates[t];
        Some(Sentence {
            id: sentence_id(name, descriptor, template.id),
            text: template.realize(&name.given_name, descriptor),
            name: name.given_name.clone(),
            ethnicity: name.ethnicity.clone(),
            gender: name.gender,
            descriptor: descriptor.clone(),
            template: template.id,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let total = self.names.len() * self.descriptors.len() * self.templates.len();
        let left = total - self.cursor.min(total);
        (left, Some(left))
    }
}

impl ExactSizeIterator for SentenceIter<'_> {}

pub fn expand_sentences<'a>(
    names: &'a [NameEntry],
    descriptors: &'a [Descriptor],
    templates: &'a [Template],
) -> Result<SentenceIter<'a>> {
    if names.is_empty() {
        return Err(CorpusError::EmptyInput("name"));
    }
    if descriptors.is_empty() {
        return Err(CorpusError::EmptyInput("descriptor"));
    }
    if templates.is_empty() {
        return Err(CorpusError::EmptyInput("template"));
    }
    for t in templates {
        // Templates may be built by hand; re-check the placeholder contract.
        Template::new(t.id, t.pattern.clone())?;
    }
    Ok(SentenceIter {
        names,
        descriptors,
        templates,
        cursor: 0,
    })
}

/// Stream sentences as JSONL; returns the number written.
pub fn write_corpus_jsonl<W: Write, I: IntoIterator<Item = Sentence>>(
    writer: &mut W,
    sentences: I,
) -> io::Result<usize> {
    let mut count = 0;
    for s in sentences {
        util::write_jsonl_line(writer, &s)?;
        count += 1;
    }
    Ok(count)
}

/// Names and labeled descriptors restricted to the racial-category setup.
#[derive(Debug, Clone)]
pub struct ValidationSubset {
    pub names: NameSet,
    /// Descriptors with gold labels rewritten to category level.
    pub descriptors: Vec<Descriptor>,
    /// Sorted category labels.
    pub categories: Vec<String>,
    pub category_of_ethnicity: BTreeMap<String, String>,
}

impl ValidationSubset {
    /// Category label for each group id of `self.names`.
    pub fn group_categories(&self) -> Vec<String> {
        self.names
            .groups()
            .iter()
            .map(|g| self.category_of_ethnicity[&g.ethnicity].clone())
            .collect()
    }
}

/// Load an `ethnicity,category` CSV.
pub fn load_category_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv_reader(path)?;
    let cols = header_positions(path, &mut rdr)?;
    let eth_col = require_column(path, &cols, "ethnicity")?;
    let cat_col = require_column(path, &cols, "category")?;
    let mut map = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|source| CorpusError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let eth = record.get(eth_col).unwrap_or("").trim().to_string();
        let cat = record.get(cat_col).unwrap_or("").trim().to_string();
        if eth.is_empty() || cat.is_empty() {
            return Err(CorpusError::MalformedRow {
                path: path.to_path_buf(),
                row: idx + 1,
                reason: "empty ethnicity or category".into(),
            });
        }
        match map.get(&eth) {
            Some(existing) if existing != &cat => {
                return Err(CorpusError::CategoryMap(format!(
                    "ethnicity {eth:?} mapped to both {existing:?} and {cat:?}"
                )))
            }
            _ => {
                map.insert(eth, cat);
            }
        }
    }
    Ok(map)
}

/// Restrict names to mapped ethnicities and descriptors to gold-labeled
/// ones, rewriting gold labels to category level. A gold label may name a
/// category directly or a mapped ethnicity.
pub fn validation_subset_with_map(
    names: &NameSet,
    descriptors: &[Descriptor],
    category_map: BTreeMap<String, String>,
) -> Result<ValidationSubset> {
    let categories: BTreeSet<String> = category_map.values().cloned().collect();
    let sub_names = names.filter_ethnicities(|e| category_map.contains_key(e));
    let mut labeled = Vec::new();
    for d in descriptors {
        let Some(gold) = &d.gold_group else { continue };
        let category = if categories.contains(gold) {
            gold.clone()
        } else if let Some(cat) = category_map.get(gold) {
            cat.clone()
        } else {
            return Err(CorpusError::CategoryMap(format!(
                "descriptor {:?} has gold label {gold:?} which is not one of the categories {:?}",
                d.text, categories
            )));
        };
        labeled.push(Descriptor {
            gold_group: Some(category),
            ..d.clone()
        });
    }
    Ok(ValidationSubset {
        names: sub_names,
        descriptors: labeled,
        categories: categories.into_iter().collect(),
        category_of_ethnicity: category_map,
    })
}

pub fn validation_subset(
    names: &NameSet,
    descriptors: &[Descriptor],
    category_map: &Path,
) -> Result<ValidationSubset> {
    validation_subset_with_map(names, descriptors, load_category_map(category_map)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn names_csv(groups: &[(&str, Gender)], per_group: usize) -> String {
        let mut s = String::from("name,ethnicity,gender\n");
        for (eth, g) in groups {
            for i in 0..per_group {
                s.push_str(&format!("{eth}{g}{i:02},{eth},{g}\n"));
            }
        }
        s
    }

    #[test]
    fn two_groups_of_ten() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "n.csv",
            &names_csv(&[("Thai", Gender::F), ("Thai", Gender::M)], 10),
        );
        let load = load_names(&p, LoadMode::Strict).unwrap();
        assert_eq!(load.names.len(), 20);
        assert_eq!(load.names.groups().len(), 2);
        assert_eq!(load.group_report(), vec!["Thai Female: 10", "Thai Male: 10"]);
    }

    #[test]
    fn one_char_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "n.csv", "name,ethnicity,gender\nAl,X,F\nA,X,F\n");
        let load = load_names(&p, LoadMode::Lax).unwrap();
        assert_eq!(load.names.len(), 1);
        assert_eq!(load.rejected.len(), 1);
        assert_eq!(load.rejected[0].row, 2);
        assert!(!load.warnings.is_empty());
        assert!(matches!(
            load_names(&p, LoadMode::Strict),
            Err(CorpusError::RejectedRows { .. })
        ));
    }

    #[test]
    fn name_length_bounds() {
        assert!(NameEntry::new("Al", "X", Gender::F).is_ok());
        assert!(NameEntry::new("Abcdefghijklmn", "X", Gender::F).is_ok());
        assert!(NameEntry::new("Abcdefghijklmno", "X", Gender::F).is_err());
        // characters, not bytes
        assert!(NameEntry::new("Zoë", "X", Gender::F).is_ok());
        assert!(NameEntry::new("É", "X", Gender::F).is_err());
    }

    #[test]
    fn gender_neutral_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "n.csv", "name,ethnicity,gender\nSam,X,N\n");
        let load = load_names(&p, LoadMode::Lax).unwrap();
        assert!(load.names.is_empty());
        assert!(load.rejected[0].reason.contains("gender"));
    }

    #[test]
    fn strict_mode_enforces_group_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "n.csv", &names_csv(&[("Thai", Gender::F)], 9));
        assert!(matches!(
            load_names(&p, LoadMode::Strict),
            Err(CorpusError::GroupShape(_))
        ));
        let lax = load_names(&p, LoadMode::Lax).unwrap();
        assert_eq!(lax.warnings.len(), 1);
    }

    #[test]
    fn missing_file_and_short_row() {
        assert!(matches!(
            load_names(Path::new("/nonexistent/names.csv"), LoadMode::Lax),
            Err(CorpusError::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "n.csv", "name,ethnicity,gender\nAl,X\n");
        assert!(matches!(
            load_names(&p, LoadMode::Lax),
            Err(CorpusError::MalformedRow { row: 1, .. })
        ));
    }

    #[test]
    fn group_ids_independent_of_row_order() {
        let a = NameSet::new(vec![
            NameEntry::new("Bo", "Z", Gender::M).unwrap(),
            NameEntry::new("Al", "A", Gender::F).unwrap(),
        ]);
        let b = NameSet::new(vec![
            NameEntry::new("Al", "A", Gender::F).unwrap(),
            NameEntry::new("Bo", "Z", Gender::M).unwrap(),
        ]);
        assert_eq!(a.groups(), b.groups());
        assert_eq!(a.groups()[0].ethnicity, "A");
    }

    #[test]
    fn descriptor_dedup_keeps_first_and_is_case_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.csv",
            "descriptor,source\ngood at math,ghavami\ngood at math,stereoset\nGood at math,other\n",
        );
        let ds = load_descriptors(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].source, DescriptorSource::Ghavami);
        assert_eq!(ds[0].axis, None);
    }

    #[test]
    fn descriptor_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "descriptor,source\n,other\n");
        assert!(load_descriptors(&p).is_err());
        let p = write(dir.path(), "d2.csv", "descriptor,source\nshy,reddit\n");
        let err = load_descriptors(&p).unwrap_err().to_string();
        assert!(err.contains("unknown descriptor source"), "{err}");
    }

    #[test]
    fn quoted_descriptor_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.csv",
            "descriptor,source,axis,gold_group\n\"loud, proud\",holisticbias,personality,\n",
        );
        let ds = load_descriptors(&p).unwrap();
        assert_eq!(ds[0].text, "loud, proud");
        assert_eq!(ds[0].axis.as_deref(), Some("personality"));
        assert_eq!(ds[0].gold_group, None);
    }

    #[test]
    fn template_placeholder_contract() {
        assert!(Template::new(0, "{name} is {descriptor}.").is_ok());
        assert!(Template::new(0, "{name} is nice.").is_err());
        assert!(Template::new(0, "{name} and {name} are {descriptor}.").is_err());
        let t = Template::new(0, "Being {descriptor} suits {name}.").unwrap();
        assert_eq!(t.realize("Kazuyo", "shy"), "Being shy suits Kazuyo.");
        // values that look like placeholders are not re-expanded
        let t = Template::new(0, "{name} is {descriptor}.").unwrap();
        assert_eq!(t.realize("{descriptor}", "x"), "{descriptor} is x.");
    }

    #[test]
    fn parse_templates_skips_comments() {
        let ts = parse_templates("# header\n{name} is {descriptor}.\n\nI met {name}, who is {descriptor}.\n")
            .unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[1].id, 1);
        assert_eq!(default_templates().len(), 3);
    }

    fn tiny() -> (Vec<NameEntry>, Vec<Descriptor>) {
        let names = vec![
            NameEntry::new("Kazuyo", "Japanese", Gender::F).unwrap(),
            NameEntry::new("Hiroshi", "Japanese", Gender::M).unwrap(),
        ];
        let ds = ["shy", "quiet", "tall"]
            .iter()
            .map(|t| Descriptor {
                text: t.to_string(),
                source: DescriptorSource::Other,
                axis: None,
                gold_group: None,
            })
            .collect();
        (names, ds)
    }

    #[test]
    fn expansion_counts_and_text() {
        let (names, ds) = tiny();
        let ts = vec![Template::new(0, "{name} is {descriptor}.").unwrap()];
        let it = expand_sentences(&names, &ds, &ts).unwrap();
        assert_eq!(it.len(), 6);
        let all: Vec<_> = it.collect();
        assert_eq!(all[0].text, "Kazuyo is shy.");
        assert_eq!(all[5].text, "Hiroshi is tall.");
        let ids: HashSet<_> = all.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn expansion_rejects_empty_and_bad_templates() {
        let (names, ds) = tiny();
        assert!(expand_sentences(&[], &ds, &default_templates()).is_err());
        let bad = vec![Template {
            id: 0,
            pattern: "{name}".into(),
        }];
        assert!(expand_sentences(&names, &ds, &bad).is_err());
    }

    #[test]
    fn corpus_jsonl_field_order() {
        let (names, ds) = tiny();
        let ts = default_templates();
        let mut buf = Vec::new();
        let n = write_corpus_jsonl(&mut buf, expand_sentences(&names, &ds, &ts).unwrap()).unwrap();
        assert_eq!(n, 18);
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"id\":\""), "{first}");
        assert!(first.contains(
            "\"text\":\"Kazuyo is shy.\",\"name\":\"Kazuyo\",\"ethnicity\":\"Japanese\",\"gender\":\"F\",\"descriptor\":\"shy\",\"template\":0}"
        ));
    }

    #[test]
    fn validation_subset_restricts_and_relabels() {
        let names = NameSet::new(vec![
            NameEntry::new("Kazuyo", "Japanese", Gender::F).unwrap(),
            NameEntry::new("Omar", "Arab", Gender::M).unwrap(),
        ]);
        let ds = vec![
            Descriptor {
                text: "good at math".into(),
                source: DescriptorSource::Ghavami,
                axis: None,
                gold_group: Some("Japanese".into()),
            },
            Descriptor {
                text: "tall".into(),
                source: DescriptorSource::Other,
                axis: None,
                gold_group: None,
            },
        ];
        let map = BTreeMap::from([("Japanese".to_string(), "Asian".to_string())]);
        let sub = validation_subset_with_map(&names, &ds, map.clone()).unwrap();
        assert_eq!(sub.names.len(), 1);
        assert_eq!(sub.descriptors.len(), 1);
        assert_eq!(sub.descriptors[0].gold_group.as_deref(), Some("Asian"));
        assert_eq!(sub.group_categories(), vec!["Asian"]);

        let mut bad = ds.clone();
        bad[0].gold_group = Some("Martian".into());
        assert!(matches!(
            validation_subset_with_map(&names, &bad, map),
            Err(CorpusError::CategoryMap(_))
        ));
    }

    #[test]
    fn category_map_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "ethnicity,category\nIndian,Asian\nIndian,White\n",
        );
        assert!(matches!(load_category_map(&p), Err(CorpusError::CategoryMap(_))));
    }

    #[test]
    fn canonical_names_csv_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "n.csv",
            &names_csv(&[("Thai", Gender::F), ("Greek", Gender::M)], 10),
        );
        let a = load_names(&p, LoadMode::Strict).unwrap().names.to_csv_string();
        let b = load_names(&p, LoadMode::Strict).unwrap().names.to_csv_string();
        assert_eq!(a, b);
        let p2 = write(dir.path(), "n2.csv", &a);
        assert_eq!(
            load_names(&p2, LoadMode::Strict).unwrap().names.to_csv_string(),
            a
        );
    }
}
