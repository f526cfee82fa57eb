//! Destination labeling: eSLD, owning entity, party and ATS status.

pub mod blocklist;

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::path::Path;

use publicsuffix::{IcannList, List, Psl};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::DataFlow;
pub use blocklist::{match_ats, Blocklist, ListFormat};

/// Entity assigned to domains without an entity-map entry.
pub const UNKNOWN_ENTITY: &str = "unknown third party";

/// Snapshot of the public suffix list shipped with the crate.
pub const BUNDLED_PSL: &[u8] = include_bytes!("../../data/public_suffix_list.dat");

#[derive(Debug, Error)]
pub enum DestinationError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("invalid public suffix list: {0}")]
    Psl(String),
}

fn read(path: &Path) -> Result<String, DestinationError> {
    std::fs::read_to_string(path).map_err(|source| DestinationError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Party {
    First,
    Third,
    Platform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationLabel {
    pub app: String,
    pub fqdn: String,
    pub esld: String,
    pub entity: String,
    pub party: Party,
    pub ats: bool,
    pub matched_lists: Vec<String>,
}

/// Per-app metadata used for first-party detection and policy merging.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppMeta {
    #[serde(alias = "app")]
    pub package: String,
    #[serde(default)]
    pub policy_url: String,
    #[serde(default)]
    pub first_party_aliases: Vec<String>,
    #[serde(default)]
    pub referenced_policies: Vec<String>,
}

impl AppMeta {
    pub fn bare(package: &str) -> Self {
        AppMeta {
            package: package.to_string(),
            ..Default::default()
        }
    }
}

/// Loads an apps metadata file (YAML or JSON list), keyed by package.
pub fn load_app_meta(path: &Path) -> Result<BTreeMap<String, AppMeta>, DestinationError> {
    let metas: Vec<AppMeta> = serde_yaml::from_str(&read(path)?).map_err(|e| DestinationError::Parse {
        path: path.display().to_string(),
        line: e.location().map(|l| l.line()).unwrap_or(0),
        message: e.to_string(),
    })?;
    Ok(metas.into_iter().map(|m| (m.package.clone(), m)).collect())
}

#[derive(Clone)]
enum SuffixRules {
    Icann(IcannList),
    Full(List),
}

/// Public suffix lookups. ICANN-only by default, which is what a plain
/// registrable-domain split gives; the private section (e.g. the
/// `s3-*.amazonaws.com` suffixes) is opt-in.
#[derive(Clone)]
pub struct SuffixList {
    rules: SuffixRules,
}

impl std::fmt::Debug for SuffixList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.rules {
            SuffixRules::Icann(_) => "icann",
            SuffixRules::Full(_) => "full",
        };
        f.debug_struct("SuffixList").field("rules", &kind).finish()
    }
}

impl SuffixList {
    pub fn from_bytes(bytes: &[u8], include_private: bool) -> Result<Self, DestinationError> {
        let rules = if include_private {
            SuffixRules::Full(List::from_bytes(bytes).map_err(|e| DestinationError::Psl(e.to_string()))?)
        } else {
            SuffixRules::Icann(IcannList::from_bytes(bytes).map_err(|e| DestinationError::Psl(e.to_string()))?)
        };
        Ok(SuffixList { rules })
    }

    pub fn bundled(include_private: bool) -> Self {
        Self::from_bytes(BUNDLED_PSL, include_private).expect("bundled list parses")
    }

    pub fn from_file(path: &Path, include_private: bool) -> Result<Self, DestinationError> {
        let bytes = std::fs::read(path).map_err(|source| DestinationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, include_private)
    }

    fn suffix<'a>(&self, name: &'a [u8]) -> Option<publicsuffix::Suffix<'a>> {
        match &self.rules {
            SuffixRules::Icann(l) => l.suffix(name),
            SuffixRules::Full(l) => l.suffix(name),
        }
    }

    /// The known public suffix of `fqdn`, if any.
    pub fn public_suffix(&self, fqdn: &str) -> Option<String> {
        if fqdn.parse::<IpAddr>().is_ok() {
            return None;
        }
        let s = self.suffix(fqdn.as_bytes())?;
        s.is_known().then(|| String::from_utf8_lossy(s.as_bytes()).into_owned())
    }

    /// Registrable domain of `fqdn`. IP literals pass through; names under an
    /// unknown suffix fall back to their last two labels.
    pub fn esld(&self, fqdn: &str) -> String {
        if fqdn.parse::<IpAddr>().is_ok() {
            return fqdn.to_string();
        }
        let labels: Vec<&str> = fqdn.split('.').collect();
        let last_two = || labels[labels.len().saturating_sub(2)..].join(".");
        let Some(suffix) = self.public_suffix(fqdn) else {
            return last_two();
        };
        if suffix.len() >= fqdn.len() {
            // the name is itself a public suffix
            return fqdn.to_string();
        }
        let head = &fqdn[..fqdn.len() - suffix.len() - 1];
        let root = head.rsplit('.').next().unwrap_or(head);
        format!("{root}.{suffix}")
    }
}

/// Ordered domain-pattern to entity mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityMap {
    entries: Vec<(String, String)>,
}

impl EntityMap {
    pub fn new(entries: Vec<(String, String)>) -> Self {
        EntityMap {
            entries: entries
                .into_iter()
                .map(|(p, e)| (p.trim().to_ascii_lowercase(), e.trim().to_string()))
                .collect(),
        }
    }

    /// Parses `pattern<TAB>entity` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self, DestinationError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let Some((pattern, entity)) = line.split_once('\t') else {
                return Err(DestinationError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    message: "expected pattern<TAB>entity".into(),
                });
            };
            entries.push((pattern.to_string(), entity.to_string()));
        }
        Ok(Self::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self, DestinationError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    /// Longest matching pattern wins, then file order. `*.d` matches `d`
    /// and its subdomains; other patterns match exactly.
    pub fn map_entity(&self, fqdn: &str) -> String {
        let mut best: Option<(usize, &str)> = None;
        for (pattern, entity) in &self.entries {
            let (domain, wildcard) = match pattern.strip_prefix("*.") {
                Some(d) => (d, true),
                None => (pattern.as_str(), false),
            };
            let hit = fqdn == domain
                || (wildcard
                    && fqdn.len() > domain.len()
                    && fqdn.ends_with(domain)
                    && fqdn.as_bytes()[fqdn.len() - domain.len() - 1] == b'.');
            if hit && best.is_none_or(|(len, _)| domain.len() > len) {
                best = Some((domain.len(), entity));
            }
        }
        best.map(|(_, e)| e.to_string())
            .unwrap_or_else(|| UNKNOWN_ENTITY.to_string())
    }
}

/// Cloud-hosting suffixes whose subdomain, not the whole name, identifies
/// the tenant. Entries are domain suffixes (`amazonaws.com`) or a label
/// followed by `.*` (`execute-api.*`) matching that label anywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudSuffixes(pub Vec<String>);

impl Default for CloudSuffixes {
    fn default() -> Self {
        CloudSuffixes(
            [
                "amazonaws.com",
                "cloudfunctions.net",
                "firebaseapp.com",
                "execute-api.*",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        )
    }
}

impl CloudSuffixes {
    /// The tenant part of `fqdn` when it is hosted under a cloud suffix;
    /// the shortest such part when several entries match.
    pub fn tenant<'a>(&self, fqdn: &'a str) -> Option<&'a str> {
        let labels: Vec<&str> = fqdn.split('.').collect();
        let mut best: Option<&'a str> = None;
        for entry in &self.0 {
            let entry = entry.to_ascii_lowercase();
            let cut = if let Some(label) = entry.strip_suffix(".*") {
                labels
                    .iter()
                    .position(|l| *l == label)
                    .map(|i| labels[..i].iter().map(|l| l.len() + 1).sum::<usize>())
            } else if fqdn.len() > entry.len()
                && fqdn.ends_with(&entry)
                && fqdn.as_bytes()[fqdn.len() - entry.len() - 1] == b'.'
            {
                Some(fqdn.len() - entry.len())
            } else {
                None
            };
            if let Some(cut) = cut {
                let sub = fqdn[..cut].trim_end_matches('.');
                if best.is_none_or(|b| sub.len() < b.len()) {
                    best = Some(sub);
                }
            }
        }
        best
    }
}

/// Tokens never used for first-party matching, besides public-suffix labels.
pub const BASE_STOPLIST: &[&str] = &["com", "net", "org", "www", "app", "api", "the"];

/// Token rule: split on `.`, `-`, `_` (and any other non-alphanumeric),
/// lowercase, keep tokens of length >= `min_len` not in `stop`.
pub fn tokens(text: &str, stop: &BTreeSet<String>, min_len: usize) -> BTreeSet<String> {
    text.to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| t.len() >= min_len && !stop.contains(*t))
        .map(String::from)
        .collect()
}

/// Everything the labeler needs, immutable after construction.
#[derive(Debug)]
pub struct Labeler {
    pub psl: SuffixList,
    pub entities: EntityMap,
    pub cloud: CloudSuffixes,
    pub lists: Vec<Blocklist>,
    pub stoplist: BTreeSet<String>,
    pub min_token_len: usize,
    pub platform_keywords: Vec<String>,
}

impl Labeler {
    pub fn new(psl: SuffixList, entities: EntityMap, cloud: CloudSuffixes, lists: Vec<Blocklist>) -> Self {
        Labeler {
            psl,
            entities,
            cloud,
            lists,
            stoplist: BASE_STOPLIST.iter().map(|s| s.to_string()).collect(),
            min_token_len: 3,
            platform_keywords: vec!["oculus".into(), "facebook".into()],
        }
    }

    pub fn esld(&self, fqdn: &str) -> String {
        self.psl.esld(fqdn)
    }

    pub fn map_entity(&self, fqdn: &str) -> String {
        self.entities.map_entity(fqdn)
    }

    /// First if a domain token occurs in the policy URL or package tokens
    /// (only the tenant part counts under a cloud suffix); Platform if the
    /// name contains a platform keyword; Third otherwise.
    pub fn categorize_party(&self, fqdn: &str, meta: &AppMeta) -> Party {
        let mut stop = self.stoplist.clone();
        if let Some(suffix) = self.psl.public_suffix(fqdn) {
            stop.extend(suffix.split('.').map(String::from));
        }
        let is_ip = fqdn.parse::<IpAddr>().is_ok();
        let domain_part = self.cloud.tenant(fqdn).unwrap_or(fqdn);
        let domain_tokens = if is_ip {
            BTreeSet::new()
        } else {
            tokens(domain_part, &stop, self.min_token_len)
        };
        let mut app_tokens = tokens(&meta.policy_url, &self.stoplist, self.min_token_len);
        app_tokens.extend(tokens(&meta.package, &self.stoplist, self.min_token_len));
        if !domain_tokens.is_disjoint(&app_tokens) {
            return Party::First;
        }
        if self.platform_keywords.iter().any(|k| fqdn.contains(k.as_str())) {
            return Party::Platform;
        }
        Party::Third
    }

    pub fn match_ats(&self, fqdn: &str, esld: &str) -> (bool, Vec<String>) {
        match_ats(fqdn, esld, &self.lists)
    }

    pub fn label(&self, app: &str, fqdn: &str, meta: &AppMeta) -> DestinationLabel {
        let esld = self.esld(fqdn);
        let (ats, matched_lists) = self.match_ats(fqdn, &esld);
        DestinationLabel {
            app: app.to_string(),
            fqdn: fqdn.to_string(),
            entity: self.map_entity(fqdn),
            party: self.categorize_party(fqdn, meta),
            esld,
            ats,
            matched_lists,
        }
    }

    /// One label per distinct (app, fqdn) among the flows, sorted.
    pub fn label_flows(&self, flows: &[DataFlow], metas: &BTreeMap<String, AppMeta>) -> Vec<DestinationLabel> {
        let pairs: BTreeSet<(&str, &str)> = flows.iter().map(|f| (f.app.as_str(), f.destination.as_str())).collect();
        pairs
            .into_iter()
            .map(|(app, fqdn)| {
                let bare;
                let meta = match metas.get(app) {
                    Some(m) => m,
                    None => {
                        bare = AppMeta::bare(app);
                        &bare
                    }
                };
                self.label(app, fqdn, meta)
            })
            .collect()
    }
}

/// Label lookup keyed by (app, fqdn).
pub fn index_labels(labels: &[DestinationLabel]) -> BTreeMap<(String, String), &DestinationLabel> {
    labels.iter().map(|l| ((l.app.clone(), l.fqdn.clone()), l)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissedRow {
    pub fqdn: String,
    pub entity: String,
    pub data_types: BTreeSet<String>,
}

/// Third-party FQDNs no blocklist caught, ranked by distinct data types
/// received (descending), ties by name.
pub fn missed_by_blocklists(flows: &[DataFlow], labels: &[DestinationLabel]) -> Vec<MissedRow> {
    let index = index_labels(labels);
    let mut rows: BTreeMap<&str, MissedRow> = BTreeMap::new();
    for f in flows {
        let Some(l) = index.get(&(f.app.clone(), f.destination.clone())) else {
            continue;
        };
        if l.party != Party::Third || l.ats {
            continue;
        }
        rows.entry(f.destination.as_str())
            .or_insert_with(|| MissedRow {
                fqdn: f.destination.clone(),
                entity: l.entity.clone(),
                data_types: BTreeSet::new(),
            })
            .data_types
            .insert(f.data_type.clone());
    }
    let mut out: Vec<MissedRow> = rows.into_values().collect();
    out.sort_by(|a, b| {
        b.data_types
            .len()
            .cmp(&a.data_types.len())
            .then_with(|| a.fqdn.cmp(&b.fqdn))
    });
    out
}
