//! Data-type extraction.
//!
//! A [`RuleSet`] is compiled from a rules file plus a per-device profile of
//! static values. [`scan`] searches the path, query, header names and values,
//! and the printable spans of the body of a request; [`flows_from_detections`]
//! folds detections into ⟨app, data type, destination⟩ flows.

pub mod keys;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use md5::{Digest, Md5};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha1::Sha1;
use thiserror::Error;

use crate::ingest::{Direction, HttpTransaction};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("rule {data_type}: pattern {pattern:?} does not compile: {source}")]
    BadPattern {
        data_type: String,
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("data type {0:?} is assigned to more than one category")]
    ConflictingCategory(String),
    #[error("static value must be non-empty")]
    EmptyStaticValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "PII")]
    Pii,
    Fingerprint,
    #[serde(rename = "VRSensoryData")]
    VrSensoryData,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Pii, Category::Fingerprint, Category::VrSensoryData];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Pii => "PII",
            Category::Fingerprint => "Fingerprint",
            Category::VrSensoryData => "VRSensoryData",
        }
    }
}

/// One entry of the rules file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub data_type: String,
    pub category: Category,
    #[serde(default)]
    pub literals: Vec<String>,
    #[serde(default)]
    pub patterns: Vec<String>,
    #[serde(default)]
    pub key_names: Vec<String>,
    /// Names looked up in the profile's `static_values`.
    #[serde(default)]
    pub static_value_refs: Vec<String>,
}

/// Per-device secrets (serial number, email, ...).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    #[serde(default)]
    pub static_values: BTreeMap<String, String>,
}

/// A rule with its static values resolved from a profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionRule {
    pub data_type: String,
    pub category: Category,
    pub literals: Vec<String>,
    pub patterns: Vec<String>,
    pub key_names: Vec<String>,
    pub static_values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Literal,
    Pattern,
    Key,
    Static,
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Path,
    Query,
    HeaderKey(usize),
    HeaderValue(usize),
    Body,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the transaction in the scanned list.
    pub txn: usize,
    pub region: Region,
    pub offset: usize,
    pub matched: String,
    pub data_type: String,
    pub category: Category,
    pub kind: RuleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFlow {
    pub app: String,
    pub data_type: String,
    pub category: Category,
    pub destination: String,
    pub evidence: Vec<Detection>,
}

/// Returns `{value, md5(value), sha1(value)}` with lowercase hex digests.
pub fn hash_variants(value: &str) -> Result<BTreeSet<String>, ExtractError> {
    if value.is_empty() {
        return Err(ExtractError::EmptyStaticValue);
    }
    Ok(BTreeSet::from([
        value.to_string(),
        hex::encode(Md5::digest(value.as_bytes())),
        hex::encode(Sha1::digest(value.as_bytes())),
    ]))
}

fn read(path: &Path) -> Result<String, ExtractError> {
    std::fs::read_to_string(path).map_err(|source| ExtractError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a rules file (YAML or JSON; JSON is valid YAML).
pub fn load_rules(path: &Path) -> Result<Vec<RuleSpec>, ExtractError> {
    serde_yaml::from_str(&read(path)?).map_err(|e| ExtractError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_profile(path: &Path) -> Result<Profile, ExtractError> {
    serde_yaml::from_str(&read(path)?).map_err(|e| ExtractError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Resolves static value references against a profile. Missing or empty
/// values are skipped with a warning.
pub fn resolve_rules(specs: &[RuleSpec], profile: &Profile) -> Vec<ExtractionRule> {
    specs
        .iter()
        .map(|s| ExtractionRule {
            data_type: s.data_type.clone(),
            category: s.category,
            literals: s.literals.clone(),
            patterns: s.patterns.clone(),
            key_names: s.key_names.clone(),
            static_values: s
                .static_value_refs
                .iter()
                .filter_map(|r| match profile.static_values.get(r) {
                    Some(v) if !v.is_empty() => Some(v.clone()),
                    _ => {
                        log::debug!("{}: no profile value for {r:?}", s.data_type);
                        None
                    }
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Compiled {
    data_type: String,
    category: Category,
    literals: Vec<String>,
    patterns: Vec<Regex>,
    keys: BTreeSet<String>,
    statics: Vec<(String, RuleKind)>,
}

/// Compiled, immutable rule set.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<Compiled>,
}

impl RuleSet {
    pub fn compile(rules: &[ExtractionRule]) -> Result<Self, ExtractError> {
        let mut categories: BTreeMap<&str, Category> = BTreeMap::new();
        let mut out = Vec::with_capacity(rules.len());
        for r in rules {
            if let Some(prev) = categories.insert(&r.data_type, r.category) {
                if prev != r.category {
                    return Err(ExtractError::ConflictingCategory(r.data_type.clone()));
                }
            }
            let patterns = r
                .patterns
                .iter()
                .map(|p| {
                    Regex::new(p).map_err(|source| ExtractError::BadPattern {
                        data_type: r.data_type.clone(),
                        pattern: p.clone(),
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut statics = Vec::new();
            for v in &r.static_values {
                for variant in hash_variants(v)? {
                    let kind = if &variant == v {
                        RuleKind::Static
                    } else {
                        RuleKind::Hash
                    };
                    statics.push((variant.to_ascii_lowercase(), kind));
                }
            }
            out.push(Compiled {
                data_type: r.data_type.clone(),
                category: r.category,
                literals: r
                    .literals
                    .iter()
                    .filter(|l| !l.is_empty())
                    .map(|l| l.to_ascii_lowercase())
                    .collect(),
                patterns,
                keys: r.key_names.iter().map(|k| keys::normalize_key(k)).collect(),
                statics,
            });
        }
        Ok(RuleSet { rules: out })
    }

    pub fn from_files(rules: &Path, profile: Option<&Path>) -> Result<Self, ExtractError> {
        let specs = load_rules(rules)?;
        let profile = match profile {
            Some(p) => load_profile(p)?,
            None => Profile::default(),
        };
        Self::compile(&resolve_rules(&specs, &profile))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Category of a data type, if some rule defines it.
    pub fn category_of(&self, data_type: &str) -> Option<Category> {
        self.rules.iter().find(|r| r.data_type == data_type).map(|r| r.category)
    }
}

/// A searchable text region.
struct Text<'a> {
    region: Region,
    base: usize,
    text: &'a str,
    /// JSON key set when the body parsed as JSON.
    json_keys: Option<&'a BTreeSet<String>>,
    keyed: KeySource,
}

#[derive(Clone, Copy, PartialEq)]
enum KeySource {
    None,
    Query,
    Whole,
    Body,
}

/// Scans one transaction. Response transactions are not scanned, since
/// they carry server data rather than data leaving the device.
pub fn scan(txn_index: usize, txn: &HttpTransaction, rules: &RuleSet) -> Vec<Detection> {
    if txn.direction == Direction::Response {
        return Vec::new();
    }
    let json_keys = keys::json_key_set(&txn.body);
    let mut regions: Vec<Text<'_>> = vec![
        Text {
            region: Region::Path,
            base: 0,
            text: &txn.path,
            json_keys: None,
            keyed: KeySource::None,
        },
        Text {
            region: Region::Query,
            base: 0,
            text: &txn.query,
            json_keys: None,
            keyed: KeySource::Query,
        },
    ];
    for (i, (k, v)) in txn.headers.iter().enumerate() {
        regions.push(Text {
            region: Region::HeaderKey(i),
            base: 0,
            text: k,
            json_keys: None,
            keyed: KeySource::Whole,
        });
        regions.push(Text {
            region: Region::HeaderValue(i),
            base: 0,
            text: v,
            json_keys: None,
            keyed: KeySource::None,
        });
    }
    for (base, text) in keys::ascii_spans(&txn.body) {
        regions.push(Text {
            region: Region::Body,
            base,
            text,
            json_keys: json_keys.as_ref(),
            keyed: KeySource::Body,
        });
    }

    let mut out = Vec::new();
    for t in &regions {
        if t.text.is_empty() {
            continue;
        }
        let lower = t.text.to_ascii_lowercase();
        let key_hits: Vec<(usize, &str, String)> = match t.keyed {
            KeySource::None => Vec::new(),
            KeySource::Query => keys::query_keys(t.text)
                .into_iter()
                .map(|k| (k.offset, k.raw, keys::normalize_key(k.raw)))
                .collect(),
            KeySource::Whole => vec![(0, t.text, keys::normalize_key(t.text))],
            KeySource::Body => keys::text_keys(t.text, t.json_keys)
                .into_iter()
                .map(|k| (k.offset, k.raw, keys::normalize_key(k.raw)))
                .collect(),
        };
        for rule in &rules.rules {
            let mut push = |offset: usize, matched: &str, kind: RuleKind| {
                out.push(Detection {
                    txn: txn_index,
                    region: t.region,
                    offset: t.base + offset,
                    matched: matched.to_string(),
                    data_type: rule.data_type.clone(),
                    category: rule.category,
                    kind,
                });
            };
            for lit in &rule.literals {
                for off in memchr::memmem::find_iter(lower.as_bytes(), lit.as_bytes()) {
                    push(off, &t.text[off..off + lit.len()], RuleKind::Literal);
                }
            }
            for re in &rule.patterns {
                for m in re.find_iter(t.text) {
                    if !m.is_empty() {
                        push(m.start(), m.as_str(), RuleKind::Pattern);
                    }
                }
            }
            for (off, raw, norm) in &key_hits {
                if rule.keys.contains(norm) {
                    push(*off, raw, RuleKind::Key);
                }
            }
            for (needle, kind) in &rule.statics {
                for off in memchr::memmem::find_iter(lower.as_bytes(), needle.as_bytes()) {
                    push(off, &t.text[off..off + needle.len()], *kind);
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Scans every transaction in parallel; output follows capture order.
pub fn scan_all(txns: &[HttpTransaction], rules: &RuleSet) -> Vec<Detection> {
    txns.par_iter()
        .enumerate()
        .map(|(i, t)| scan(i, t, rules))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Groups detections by (app, data type, host). Evidence keeps capture order;
/// flows are sorted by the triple.
pub fn flows_from_detections(dets: &[Detection], txns: &[HttpTransaction]) -> Vec<DataFlow> {
    let mut groups: BTreeMap<(String, String, String), DataFlow> = BTreeMap::new();
    let mut ordered: Vec<&Detection> = dets.iter().collect();
    ordered.sort_by_key(|d| d.txn);
    for d in ordered {
        let txn = &txns[d.txn];
        let key = (txn.app.clone(), d.data_type.clone(), txn.host.clone());
        groups
            .entry(key)
            .or_insert_with(|| DataFlow {
                app: txn.app.clone(),
                data_type: d.data_type.clone(),
                category: d.category,
                destination: txn.host.clone(),
                evidence: Vec::new(),
            })
            .evidence
            .push(d.clone());
    }
    groups.into_values().collect()
}
