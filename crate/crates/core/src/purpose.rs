//! Purposes for consistent flows: policy sentences are matched to annotated
//! policy segments by bag-of-words containment and the segment purposes are
//! attached to the flow.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::consistency::DisclosureVerdict;
use crate::extract::Category;
use crate::ontology::normalize_term;

#[derive(Debug, Error)]
pub enum PurposeError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("flow {app} {data_type} -> {destination} is not consistently disclosed")]
    NotConsistent {
        app: String,
        data_type: String,
        destination: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PurposeLabel {
    BasicServiceFeature,
    ServiceOperationAndSecurity,
    PersonalizationCustomization,
    LegalRequirement,
    MergerAcquisition,
    Advertising,
    AnalyticsResearch,
    Marketing,
    AdditionalServiceFeature,
    Unspecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FunctionalClass {
    Core,
    Unrelated,
    Unspecific,
}

impl PurposeLabel {
    pub const ALL: [PurposeLabel; 10] = [
        PurposeLabel::BasicServiceFeature,
        PurposeLabel::ServiceOperationAndSecurity,
        PurposeLabel::PersonalizationCustomization,
        PurposeLabel::LegalRequirement,
        PurposeLabel::MergerAcquisition,
        PurposeLabel::Advertising,
        PurposeLabel::AnalyticsResearch,
        PurposeLabel::Marketing,
        PurposeLabel::AdditionalServiceFeature,
        PurposeLabel::Unspecific,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PurposeLabel::BasicServiceFeature => "basic service feature",
            PurposeLabel::ServiceOperationAndSecurity => "service operation and security",
            PurposeLabel::PersonalizationCustomization => "personalization customization",
            PurposeLabel::LegalRequirement => "legal requirement",
            PurposeLabel::MergerAcquisition => "merger acquisition",
            PurposeLabel::Advertising => "advertising",
            PurposeLabel::AnalyticsResearch => "analytics research",
            PurposeLabel::Marketing => "marketing",
            PurposeLabel::AdditionalServiceFeature => "additional service feature",
            PurposeLabel::Unspecific => "unspecific",
        }
    }

    pub fn functional_class(self) -> FunctionalClass {
        use PurposeLabel::*;
        match self {
            BasicServiceFeature
            | ServiceOperationAndSecurity
            | PersonalizationCustomization
            | LegalRequirement
            | MergerAcquisition => FunctionalClass::Core,
            Advertising | AnalyticsResearch | Marketing | AdditionalServiceFeature => FunctionalClass::Unrelated,
            Unspecific => FunctionalClass::Unspecific,
        }
    }
}

impl fmt::Display for PurposeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PurposeLabel {
    type Err = String;

    /// Accepts the label name with any of `_`, `/`, `-` or `&` as separators.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spaced: String = s
            .chars()
            .map(|c| if matches!(c, '_' | '/' | '-' | '&') { ' ' } else { c })
            .collect();
        let norm = normalize_term(&spaced).replace(" and ", " ");
        PurposeLabel::ALL
            .into_iter()
            .find(|l| l.name().replace(" and ", " ") == norm)
            .ok_or_else(|| format!("unknown purpose label {s:?}"))
    }
}

impl Serialize for PurposeLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PurposeLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSegment {
    pub policy_id: String,
    pub segment_id: String,
    pub text: String,
    #[serde(default)]
    pub purposes: BTreeSet<PurposeLabel>,
}

impl AnnotatedSegment {
    pub fn new(policy_id: &str, segment_id: &str, text: &str, purposes: &[PurposeLabel]) -> Self {
        let mut s = AnnotatedSegment {
            policy_id: policy_id.into(),
            segment_id: segment_id.into(),
            text: text.into(),
            purposes: purposes.iter().copied().collect(),
        };
        s.coerce();
        s
    }

    fn coerce(&mut self) {
        if self.purposes.is_empty() {
            self.purposes.insert(PurposeLabel::Unspecific);
        }
    }
}

pub fn parse_segments(data: &[u8], origin: &str) -> Result<Vec<AnnotatedSegment>, PurposeError> {
    let err = |line: usize, message: String| PurposeError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut seg: AnnotatedSegment = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        seg.coerce();
        out.push(seg);
    }
    Ok(out)
}

pub fn load_segments(path: &Path) -> Result<Vec<AnnotatedSegment>, PurposeError> {
    let data = std::fs::read(path).map_err(|source| PurposeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_segments(&data, &path.display().to_string())
}

/// Lowercase alphanumeric tokens of length two or more.
pub fn bag_of_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() > 1)
        .map(|t| t.to_lowercase())
        .collect()
}

/// Splits on `.`, `!` and `?`, except a `.` between two digits.
pub fn sentences(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        let boundary = match c {
            '!' | '?' => true,
            '.' => {
                let prev = i > 0 && bytes[i - 1].is_ascii_digit();
                let next = bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit());
                !(prev && next)
            }
            _ => false,
        };
        if boundary {
            let s = text[start..i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + c.len_utf8();
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn contains_match(sentence: &BTreeSet<String>, segment: &AnnotatedSegment) -> bool {
    if sentence.is_empty() {
        return false;
    }
    if bag_of_words(&segment.text).is_superset(sentence) {
        return true;
    }
    sentences(&segment.text).into_iter().any(|s| {
        let own = bag_of_words(s);
        !own.is_empty() && own.is_subset(sentence)
    })
}

/// All segments matching `sentence`, in document order.
pub fn matching_segments<'a>(
    sentence: &str,
    segments: &'a [AnnotatedSegment],
) -> impl Iterator<Item = &'a AnnotatedSegment> {
    let words = bag_of_words(sentence);
    segments.iter().filter(move |s| contains_match(&words, s))
}

/// First segment whose words contain the sentence's, or one of whose own
/// sentences is contained in it.
pub fn match_segment<'a>(sentence: &str, segments: &'a [AnnotatedSegment]) -> Option<&'a AnnotatedSegment> {
    matching_segments(sentence, segments).next()
}

/// Purposes of one flow, each with the first segment that contributed it.
pub type PurposeSet = BTreeMap<PurposeLabel, Option<String>>;

/// Purposes attached to a consistent verdict. Only segments of the policy
/// each statement came from are considered. `unspecific` survives only
/// when nothing concrete was found.
pub fn annotate_flow(
    verdict: &DisclosureVerdict,
    segments: &[AnnotatedSegment],
    first_match_only: bool,
) -> Result<PurposeSet, PurposeError> {
    if !verdict.is_consistent() {
        return Err(PurposeError::NotConsistent {
            app: verdict.app.clone(),
            data_type: verdict.data_type.clone(),
            destination: verdict.destination.clone(),
        });
    }
    let mut out = PurposeSet::new();
    for stmt in &verdict.matched_collect {
        let policy = normalize_term(&stmt.source_policy);
        let candidates: Vec<AnnotatedSegment> = segments
            .iter()
            .filter(|s| normalize_term(&s.policy_id) == policy)
            .cloned()
            .collect();
        let hits: Vec<&AnnotatedSegment> = if first_match_only {
            match_segment(&stmt.sentence, &candidates).into_iter().collect()
        } else {
            matching_segments(&stmt.sentence, &candidates).collect()
        };
        for seg in hits {
            for &p in &seg.purposes {
                out.entry(p).or_insert_with(|| Some(seg.segment_id.clone()));
            }
        }
    }
    if out.len() > 1 {
        out.remove(&PurposeLabel::Unspecific);
    }
    if out.is_empty() {
        out.insert(PurposeLabel::Unspecific, None);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposedFlow {
    pub app: String,
    pub data_type: String,
    pub category: Category,
    pub destination: String,
    pub entity: String,
    pub purpose: PurposeLabel,
    pub functional_class: FunctionalClass,
    pub segment_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposeTallies {
    /// Consistent flows that were annotated.
    pub flows: usize,
    /// Records with a core purpose.
    pub core: usize,
    /// Records with an unrelated purpose.
    pub unrelated: usize,
    /// Flows whose only purpose is `unspecific`; they yield no records.
    pub unspecific: usize,
    pub by_purpose: BTreeMap<PurposeLabel, usize>,
}

impl PurposeTallies {
    pub fn records(&self) -> usize {
        self.core + self.unrelated
    }
}

/// One record per (flow, purpose), skipping flows whose only purpose is
/// `unspecific`.
pub fn expand_and_categorize(flows: &[(&DisclosureVerdict, PurposeSet)]) -> (Vec<PurposedFlow>, PurposeTallies) {
    let mut records = Vec::new();
    let mut t = PurposeTallies {
        flows: flows.len(),
        ..Default::default()
    };
    for (v, set) in flows {
        if set.keys().all(|&p| p == PurposeLabel::Unspecific) {
            t.unspecific += 1;
            continue;
        }
        for (&purpose, segment) in set {
            let class = purpose.functional_class();
            match class {
                FunctionalClass::Core => t.core += 1,
                FunctionalClass::Unrelated => t.unrelated += 1,
                FunctionalClass::Unspecific => continue,
            }
            *t.by_purpose.entry(purpose).or_default() += 1;
            records.push(PurposedFlow {
                app: v.app.clone(),
                data_type: v.data_type.clone(),
                category: v.category,
                destination: v.destination.clone(),
                entity: v.flow.entity.node.clone().unwrap_or_else(|| v.flow.entity.raw.clone()),
                purpose,
                functional_class: class,
                segment_id: segment.clone(),
            });
        }
    }
    (records, t)
}

/// Annotates every consistent verdict and expands the result.
pub fn purposes_for(
    verdicts: &[DisclosureVerdict],
    segments: &[AnnotatedSegment],
    first_match_only: bool,
) -> (Vec<PurposedFlow>, PurposeTallies) {
    let annotated: Vec<(&DisclosureVerdict, PurposeSet)> = verdicts
        .iter()
        .filter(|v| v.is_consistent())
        .map(|v| {
            (
                v,
                annotate_flow(v, segments, first_match_only).expect("filtered to consistent"),
            )
        })
        .collect();
    expand_and_categorize(&annotated)
}

pub fn write_purposed<W: Write>(mut w: W, records: &[PurposedFlow]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_purposed(data: &[u8], origin: &str) -> Result<Vec<PurposedFlow>, PurposeError> {
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let err = |message: String| PurposeError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}
