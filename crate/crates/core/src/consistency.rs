//! Flow-to-policy consistency: merge collection statements, resolve first
//! parties and classify every flow as clear, vague, omitted, ambiguous or
//! incorrect.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::destination::{index_labels, AppMeta, DestinationLabel, Party, UNKNOWN_ENTITY};
use crate::extract::{Category, DataFlow};
use crate::ontology::{normalize_term, Ontology, OntologyError, TermRef};

pub const FIRST_PARTY: &str = "we";
const PRONOUNS: [&str; 3] = ["we", "us", "our"];

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Collect,
    NotCollect,
}

/// One line of a statements file. In a policy library `app` names the
/// library entity instead of an app.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StatementRecord {
    pub app: String,
    pub entity: String,
    pub action: Action,
    pub data_type: String,
    pub sentence_id: String,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CollectionStatement {
    pub app: String,
    pub entity: TermRef,
    pub action: Action,
    pub data_type: TermRef,
    pub sentence_id: String,
    pub sentence: String,
    /// The app itself or the library entity whose policy was included.
    pub source_policy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowKey {
    pub data_type: TermRef,
    pub entity: TermRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disclosure {
    Clear,
    Vague,
    Omitted,
    Ambiguous,
    Incorrect,
}

impl Disclosure {
    pub const ALL: [Disclosure; 5] = [
        Disclosure::Clear,
        Disclosure::Vague,
        Disclosure::Omitted,
        Disclosure::Ambiguous,
        Disclosure::Incorrect,
    ];

    pub fn is_consistent(self) -> bool {
        matches!(self, Disclosure::Clear | Disclosure::Vague)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Disclosure::Clear => "clear",
            Disclosure::Vague => "vague",
            Disclosure::Omitted => "omitted",
            Disclosure::Ambiguous => "ambiguous",
            Disclosure::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclosureVerdict {
    pub app: String,
    pub data_type: String,
    pub category: Category,
    pub destination: String,
    pub flow: FlowKey,
    pub class: Disclosure,
    pub matched_collect: Vec<CollectionStatement>,
    pub matched_not_collect: Vec<CollectionStatement>,
    /// Sentences that produced both a matching collect and not_collect.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicting_sentences: Vec<String>,
}

impl DisclosureVerdict {
    pub fn is_consistent(&self) -> bool {
        self.class.is_consistent()
    }
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> ConsistencyError {
    ConsistencyError::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses statement JSONL; every record needs a non-empty sentence.
pub fn parse_statements(data: &[u8], origin: &str) -> Result<Vec<StatementRecord>, ConsistencyError> {
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let line = line.map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StatementRecord = serde_json::from_str(&line).map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
        if rec.sentence.trim().is_empty() {
            return Err(parse_err(origin, i + 1, "empty sentence"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_statements(path: &Path) -> Result<Vec<StatementRecord>, ConsistencyError> {
    let data = std::fs::read(path).map_err(|source| ConsistencyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_statements(&data, &path.display().to_string())
}

/// Groups library statements by normalized entity name.
pub fn library_by_entity(records: Vec<StatementRecord>) -> BTreeMap<String, Vec<StatementRecord>> {
    let mut out: BTreeMap<String, Vec<StatementRecord>> = BTreeMap::new();
    for r in records {
        out.entry(normalize_term(&r.app)).or_default().push(r);
    }
    out
}

/// A statement prior to ontology resolution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MergedStatement {
    pub record: StatementRecord,
    pub source_policy: String,
}

/// The app's own statements plus every referenced or auto-included library
/// policy, with the library's first person rewritten to its entity name.
/// Returns the merged list and the entities that had no library entry.
pub fn merge_policies(
    app_stmts: &[StatementRecord],
    meta: &AppMeta,
    library: &BTreeMap<String, Vec<StatementRecord>>,
    auto_include: &BTreeSet<String>,
) -> (Vec<MergedStatement>, Vec<String>) {
    let mut out: Vec<MergedStatement> = app_stmts
        .iter()
        .map(|r| MergedStatement {
            record: r.clone(),
            source_policy: meta.package.clone(),
        })
        .collect();
    let included: BTreeSet<String> = meta
        .referenced_policies
        .iter()
        .chain(auto_include)
        .map(|e| normalize_term(e))
        .collect();
    let mut unknown = Vec::new();
    for entity in included {
        let Some(stmts) = library.get(&entity) else {
            log::warn!("{}: no library policy for referenced entity {entity:?}", meta.package);
            unknown.push(entity);
            continue;
        };
        for s in stmts {
            let mut record = s.clone();
            record.app = meta.package.clone();
            if PRONOUNS.contains(&normalize_term(&record.entity).as_str()) {
                record.entity = entity.clone();
            }
            out.push(MergedStatement {
                record,
                source_policy: entity.clone(),
            });
        }
    }
    (out, unknown)
}

/// Maps first-person pronouns and the app's own names to `we`.
pub fn resolve_first_party(mut stmt: StatementRecord, meta: &AppMeta) -> StatementRecord {
    let e = normalize_term(&stmt.entity);
    if PRONOUNS.contains(&e.as_str()) || meta.first_party_aliases.iter().any(|a| normalize_term(a) == e) {
        stmt.entity = FIRST_PARTY.to_string();
    }
    stmt
}

/// Resolves both terms of each merged statement; statements with an
/// unresolved term are returned separately.
pub fn resolve_statements(
    merged: Vec<MergedStatement>,
    meta: &AppMeta,
    data_ont: &Ontology,
    entity_ont: &Ontology,
) -> (Vec<CollectionStatement>, Vec<StatementRecord>) {
    let mut ok = Vec::new();
    let mut dropped = Vec::new();
    for m in merged {
        let r = resolve_first_party(m.record, meta);
        let entity = entity_ont.resolve(&r.entity);
        let data_type = data_ont.resolve(&r.data_type);
        if !entity.is_resolved() || !data_type.is_resolved() {
            log::warn!(
                "{}: dropping statement {} with unresolved terms ({:?}, {:?})",
                r.app,
                r.sentence_id,
                r.entity,
                r.data_type
            );
            dropped.push(r);
            continue;
        }
        ok.push(CollectionStatement {
            app: r.app,
            entity,
            action: r.action,
            data_type,
            sentence_id: r.sentence_id,
            sentence: r.sentence,
            source_policy: m.source_policy,
        });
    }
    ok.sort();
    ok.dedup();
    (ok, dropped)
}

/// The statements that cover a flow, split by action.
pub fn matching<'a>(
    flow: &FlowKey,
    stmts: &'a [CollectionStatement],
    data_ont: &Ontology,
    entity_ont: &Ontology,
) -> Result<(Vec<&'a CollectionStatement>, Vec<&'a CollectionStatement>), OntologyError> {
    for t in [&flow.data_type, &flow.entity] {
        if !t.is_resolved() {
            return Err(OntologyError::UnresolvedTerm(t.raw.clone()));
        }
    }
    let mut collect = Vec::new();
    let mut not_collect = Vec::new();
    for s in stmts {
        if data_ont.subsumes(&s.data_type, &flow.data_type)? && entity_ont.subsumes(&s.entity, &flow.entity)? {
            match s.action {
                Action::Collect => collect.push(s),
                Action::NotCollect => not_collect.push(s),
            }
        }
    }
    Ok((collect, not_collect))
}

/// Five-way disclosure class from the matching statements.
pub fn classify_matches(
    flow: &FlowKey,
    collect: &[&CollectionStatement],
    not_collect: &[&CollectionStatement],
) -> Disclosure {
    match (collect.is_empty(), not_collect.is_empty()) {
        (true, true) => Disclosure::Omitted,
        (false, true) => {
            let exact = collect
                .iter()
                .any(|s| s.data_type.node == flow.data_type.node && s.entity.node == flow.entity.node);
            if exact {
                Disclosure::Clear
            } else {
                Disclosure::Vague
            }
        }
        (true, false) => Disclosure::Incorrect,
        (false, false) => Disclosure::Ambiguous,
    }
}

pub fn classify(
    flow: &FlowKey,
    stmts: &[CollectionStatement],
    data_ont: &Ontology,
    entity_ont: &Ontology,
) -> Result<Disclosure, OntologyError> {
    let (c, n) = matching(flow, stmts, data_ont, entity_ont)?;
    Ok(classify_matches(flow, &c, &n))
}

/// Ontology terms for a flow: `we` for first-party destinations, otherwise
/// the mapped entity, falling back to the unknown-third-party node.
pub fn flow_key(
    flow: &DataFlow,
    label: Option<&DestinationLabel>,
    data_ont: &Ontology,
    entity_ont: &Ontology,
) -> Result<FlowKey, OntologyError> {
    let data_type = data_ont.resolve(&flow.data_type);
    if !data_type.is_resolved() {
        return Err(OntologyError::UnresolvedTerm(flow.data_type.clone()));
    }
    let entity = match label {
        Some(l) if l.party == Party::First => entity_ont.resolve(FIRST_PARTY),
        Some(l) => entity_ont.resolve(&l.entity),
        None => entity_ont.resolve(UNKNOWN_ENTITY),
    };
    let entity = if entity.is_resolved() {
        entity
    } else {
        log::warn!("entity {:?} not in the entity ontology", entity.raw);
        TermRef {
            raw: entity.raw,
            node: entity_ont.resolve(UNKNOWN_ENTITY).node,
        }
    };
    if !entity.is_resolved() {
        return Err(OntologyError::UnresolvedTerm(UNKNOWN_ENTITY.to_string()));
    }
    Ok(FlowKey { data_type, entity })
}

pub fn verdict(
    flow: &DataFlow,
    key: FlowKey,
    stmts: &[CollectionStatement],
    data_ont: &Ontology,
    entity_ont: &Ontology,
) -> Result<DisclosureVerdict, OntologyError> {
    let (c, n) = matching(&key, stmts, data_ont, entity_ont)?;
    let class = classify_matches(&key, &c, &n);
    let collect_ids: BTreeSet<&str> = c.iter().map(|s| s.sentence_id.as_str()).collect();
    let conflicting: BTreeSet<String> = n
        .iter()
        .filter(|s| collect_ids.contains(s.sentence_id.as_str()))
        .map(|s| s.sentence_id.clone())
        .collect();
    Ok(DisclosureVerdict {
        app: flow.app.clone(),
        data_type: flow.data_type.clone(),
        category: flow.category,
        destination: flow.destination.clone(),
        flow: key,
        class,
        matched_collect: c.into_iter().cloned().collect(),
        matched_not_collect: n.into_iter().cloned().collect(),
        conflicting_sentences: conflicting.into_iter().collect(),
    })
}

/// Merged, resolved statements per app.
pub struct PolicySet {
    pub by_app: BTreeMap<String, Vec<CollectionStatement>>,
    pub dropped: Vec<StatementRecord>,
    pub unknown_references: BTreeSet<String>,
}

impl PolicySet {
    /// Builds statement sets for every app appearing in `apps`. Apps with
    /// no statements of their own get only library inclusions, if any.
    pub fn build<'a>(
        apps: impl IntoIterator<Item = &'a str>,
        statements: &[StatementRecord],
        metas: &BTreeMap<String, AppMeta>,
        library: &BTreeMap<String, Vec<StatementRecord>>,
        auto_include: &BTreeSet<String>,
        data_ont: &Ontology,
        entity_ont: &Ontology,
    ) -> Self {
        let mut own: BTreeMap<&str, Vec<StatementRecord>> = BTreeMap::new();
        for s in statements {
            own.entry(s.app.as_str()).or_default().push(s.clone());
        }
        let mut by_app = BTreeMap::new();
        let mut dropped = Vec::new();
        let mut unknown_references = BTreeSet::new();
        let apps: BTreeSet<&str> = apps.into_iter().collect();
        for app in apps {
            let meta = metas.get(app).cloned().unwrap_or_else(|| AppMeta::bare(app));
            let (merged, unknown) = merge_policies(
                own.get(app).map(Vec::as_slice).unwrap_or(&[]),
                &meta,
                library,
                auto_include,
            );
            unknown_references.extend(unknown);
            let (ok, bad) = resolve_statements(merged, &meta, data_ont, entity_ont);
            dropped.extend(bad);
            by_app.insert(app.to_string(), ok);
        }
        PolicySet {
            by_app,
            dropped,
            unknown_references,
        }
    }

    pub fn for_app(&self, app: &str) -> &[CollectionStatement] {
        self.by_app.get(app).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Classifies every flow, preserving input order.
pub fn check_flows(
    flows: &[DataFlow],
    labels: &[DestinationLabel],
    policies: &PolicySet,
    data_ont: &Ontology,
    entity_ont: &Ontology,
) -> Result<Vec<DisclosureVerdict>, OntologyError> {
    let index = index_labels(labels);
    flows
        .par_iter()
        .map(|f| {
            let label = index.get(&(f.app.clone(), f.destination.clone())).copied();
            let key = flow_key(f, label, data_ont, entity_ont)?;
            verdict(f, key, policies.for_app(&f.app), data_ont, entity_ont)
        })
        .collect()
}

pub fn write_verdicts<W: Write>(mut w: W, verdicts: &[DisclosureVerdict]) -> std::io::Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_verdicts(data: &[u8], origin: &str) -> Result<Vec<DisclosureVerdict>, ConsistencyError> {
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let line = line.map_err(|e| parse_err(origin, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(origin, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Count of each class, with every class present.
pub type Histogram = BTreeMap<Disclosure, usize>;

pub fn empty_histogram() -> Histogram {
    Disclosure::ALL.iter().map(|&d| (d, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyTotals {
    pub total: usize,
    pub consistent: usize,
    pub inconsistent: usize,
    pub by_class: Histogram,
    pub by_category: BTreeMap<Category, Histogram>,
    pub by_entity: BTreeMap<String, Histogram>,
}

impl ConsistencyTotals {
    pub fn consistent_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.consistent as f64 / self.total as f64
        }
    }
}

/// Per-class, per-category and per-entity counts. The entity key is the
/// flow's canonical entity node.
pub fn summarize(verdicts: &[DisclosureVerdict]) -> ConsistencyTotals {
    let mut by_class = empty_histogram();
    let mut by_category: BTreeMap<Category, Histogram> =
        Category::ALL.iter().map(|&c| (c, empty_histogram())).collect();
    let mut by_entity: BTreeMap<String, Histogram> = BTreeMap::new();
    for v in verdicts {
        *by_class.entry(v.class).or_default() += 1;
        *by_category
            .entry(v.category)
            .or_insert_with(empty_histogram)
            .entry(v.class)
            .or_default() += 1;
        let entity = v.flow.entity.node.clone().unwrap_or_else(|| v.flow.entity.raw.clone());
        *by_entity
            .entry(entity)
            .or_insert_with(empty_histogram)
            .entry(v.class)
            .or_default() += 1;
    }
    let consistent = verdicts.iter().filter(|v| v.is_consistent()).count();
    ConsistencyTotals {
        total: verdicts.len(),
        consistent,
        inconsistent: verdicts.len() - consistent,
        by_class,
        by_category,
        by_entity,
    }
}
