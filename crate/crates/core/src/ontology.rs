//! Term ontologies: multi-parent DAGs of hypernym links plus synonym lists.
//!
//! An edge `child -> parent` means the parent is the broader term. The
//! ancestor closure is computed once at load time, so [`Ontology::subsumes`]
//! is a bit test and the structure is read-only afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OntologyError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: expected two tab-separated terms")]
    Parse { path: String, line: usize },
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("synonym {alias:?} points at missing node {target:?}")]
    DanglingSynonym { alias: String, target: String },
    #[error("synonym {0:?} collides with a node of the same name")]
    DuplicateNode(String),
    #[error("synonym {alias:?} maps to both {first:?} and {second:?}")]
    ConflictingSynonym {
        alias: String,
        first: String,
        second: String,
    },
    #[error("term {0:?} does not resolve")]
    UnresolvedTerm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OntologyKind {
    Data,
    Entity,
}

/// Lowercase, collapse whitespace, drop punctuation other than hyphens
/// between alphanumerics.
pub fn normalize_term(raw: &str) -> String {
    let chars: Vec<char> = raw.trim().chars().collect();
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for (i, &c) in chars.iter().enumerate() {
        let keep = if c.is_alphanumeric() {
            true
        } else if c == '-' {
            let prev = i > 0 && chars[i - 1].is_alphanumeric();
            let next = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            prev && next
        } else {
            false
        };
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if keep {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// A raw term and the node it resolves to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermRef {
    pub raw: String,
    /// Canonical node name, `None` when unresolved.
    pub node: Option<String>,
}

impl TermRef {
    pub fn is_resolved(&self) -> bool {
        self.node.is_some()
    }

    pub fn canonical(&self) -> Result<&str, OntologyError> {
        self.node
            .as_deref()
            .ok_or_else(|| OntologyError::UnresolvedTerm(self.raw.clone()))
    }
}

#[derive(Debug, Clone)]
struct BitSet(Vec<u64>);

impl BitSet {
    fn new(n: usize) -> Self {
        BitSet(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }
    fn union(&mut self, other: &BitSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ontology {
    pub kind: OntologyKind,
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    synonyms: BTreeMap<String, usize>,
    /// Strict ancestors of each node.
    ancestors: Vec<BitSet>,
}

impl Ontology {
    /// Builds an ontology from `(child, parent)` edges, isolated `nodes`
    /// and `(alias, canonical)` synonyms. All terms are normalized.
    pub fn build(
        kind: OntologyKind,
        edges: &[(String, String)],
        nodes: &[String],
        synonyms: &[(String, String)],
    ) -> Result<Self, OntologyError> {
        let mut names: BTreeSet<String> = nodes.iter().map(|n| normalize_term(n)).collect();
        let edges: Vec<(String, String)> = edges
            .iter()
            .map(|(c, p)| (normalize_term(c), normalize_term(p)))
            .collect();
        for (c, p) in &edges {
            names.insert(c.clone());
            names.insert(p.clone());
        }
        names.remove("");
        let nodes: Vec<String> = names.into_iter().collect();
        let index: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut parents = vec![Vec::new(); nodes.len()];
        for (c, p) in &edges {
            let (ci, pi) = (index[c], index[p]);
            if !parents[ci].contains(&pi) {
                parents[ci].push(pi);
            }
        }
        for ps in &mut parents {
            ps.sort_unstable();
        }

        let order = topo_order(&nodes, &parents)?;
        let mut ancestors = vec![BitSet::new(nodes.len()); nodes.len()];
        // parents come before children in `order`
        for &n in &order {
            let mut acc = BitSet::new(nodes.len());
            for &p in &parents[n] {
                acc.set(p);
                acc.union(&ancestors[p]);
            }
            ancestors[n] = acc;
        }

        let mut syn: BTreeMap<String, usize> = BTreeMap::new();
        for (alias, target) in synonyms {
            let (a, t) = (normalize_term(alias), normalize_term(target));
            let Some(&ti) = index.get(&t) else {
                return Err(OntologyError::DanglingSynonym {
                    alias: alias.clone(),
                    target: target.clone(),
                });
            };
            if index.contains_key(&a) {
                if a == t {
                    continue;
                }
                return Err(OntologyError::DuplicateNode(a));
            }
            match syn.get(&a) {
                Some(&prev) if prev != ti => {
                    return Err(OntologyError::ConflictingSynonym {
                        alias: a,
                        first: nodes[prev].clone(),
                        second: t,
                    })
                }
                _ => {
                    syn.insert(a, ti);
                }
            }
        }

        Ok(Ontology {
            kind,
            nodes,
            index,
            parents,
            synonyms: syn,
            ancestors,
        })
    }

    /// Parses an edges file (`child<TAB>parent`, or a lone term for an
    /// isolated node) and an optional synonyms file (`alias<TAB>canonical`).
    pub fn parse(
        kind: OntologyKind,
        edges_text: &str,
        synonyms_text: Option<&str>,
        origin: &str,
    ) -> Result<Self, OntologyError> {
        let (edges, lone) = parse_pairs(edges_text, origin, true)?;
        let (syns, _) = match synonyms_text {
            Some(t) => parse_pairs(t, origin, false)?,
            None => (Vec::new(), Vec::new()),
        };
        Self::build(kind, &edges, &lone, &syns)
    }

    pub fn load(kind: OntologyKind, edges_path: &Path, synonyms_path: Option<&Path>) -> Result<Self, OntologyError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| OntologyError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        let edges = read(edges_path)?;
        let syns = synonyms_path.map(read).transpose()?;
        Self::parse(kind, &edges, syns.as_deref(), &edges_path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node names in sorted order.
    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn contains(&self, node: &str) -> bool {
        self.index.contains_key(node)
    }

    /// Direct parents of a canonical node.
    pub fn parents(&self, node: &str) -> Vec<&str> {
        self.index
            .get(node)
            .map(|&i| self.parents[i].iter().map(|&p| self.nodes[p].as_str()).collect())
            .unwrap_or_default()
    }

    /// Nodes without children.
    pub fn leaves(&self) -> Vec<&str> {
        let mut has_child = vec![false; self.nodes.len()];
        for ps in &self.parents {
            for &p in ps {
                has_child[p] = true;
            }
        }
        self.nodes
            .iter()
            .zip(has_child)
            .filter(|(_, c)| !c)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Nodes without parents.
    pub fn roots(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .zip(&self.parents)
            .filter(|(_, p)| p.is_empty())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Parents-first order of all nodes.
    pub fn topological_order(&self) -> Vec<&str> {
        topo_order(&self.nodes, &self.parents)
            .expect("validated at build")
            .into_iter()
            .map(|i| self.nodes[i].as_str())
            .collect()
    }

    /// Synonym lookup, then exact node match, on the normalized text.
    pub fn resolve(&self, raw: &str) -> TermRef {
        let norm = normalize_term(raw);
        let node = self
            .synonyms
            .get(&norm)
            .or_else(|| self.index.get(&norm))
            .map(|&i| self.nodes[i].clone());
        TermRef {
            raw: raw.to_string(),
            node,
        }
    }

    /// True iff `ancestor` equals `descendant` or is reachable from it by
    /// following child-to-parent links.
    pub fn subsumes(&self, ancestor: &TermRef, descendant: &TermRef) -> Result<bool, OntologyError> {
        let a = self.node_index(ancestor)?;
        let d = self.node_index(descendant)?;
        Ok(a == d || self.ancestors[d].get(a))
    }

    /// [`Ontology::subsumes`] on raw strings.
    pub fn subsumes_terms(&self, ancestor: &str, descendant: &str) -> Result<bool, OntologyError> {
        self.subsumes(&self.resolve(ancestor), &self.resolve(descendant))
    }

    fn node_index(&self, t: &TermRef) -> Result<usize, OntologyError> {
        t.node
            .as_ref()
            .and_then(|n| self.index.get(n).copied())
            .ok_or_else(|| OntologyError::UnresolvedTerm(t.raw.clone()))
    }
}

type Pairs = (Vec<(String, String)>, Vec<String>);

fn parse_pairs(text: &str, origin: &str, allow_lone: bool) -> Result<Pairs, OntologyError> {
    let mut pairs = Vec::new();
    let mut lone = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        match line.split_once('\t') {
            Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                pairs.push((a.trim().to_string(), b.trim().to_string()))
            }
            None if allow_lone => lone.push(line.trim().to_string()),
            _ => {
                return Err(OntologyError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                })
            }
        }
    }
    Ok((pairs, lone))
}

/// Kahn-style ordering, parents before children; on failure reports one
/// cycle as a path of node names.
fn topo_order(nodes: &[String], parents: &[Vec<usize>]) -> Result<Vec<usize>, OntologyError> {
    let n = nodes.len();
    let mut children = vec![Vec::new(); n];
    let mut pending: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(c);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| pending[i] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for &c in children[i].iter().rev() {
            pending[c] -= 1;
            if pending[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Walk parent links among the unordered nodes until one repeats.
    let stuck: BTreeSet<usize> = (0..n).filter(|&i| pending[i] > 0).collect();
    let start = *stuck.iter().next().expect("some node is stuck");
    let mut path = vec![start];
    let mut seen = BTreeMap::from([(start, 0usize)]);
    let mut cur = start;
    loop {
        let next = *parents[cur]
            .iter()
            .find(|p| stuck.contains(p))
            .expect("stuck nodes keep a stuck parent");
        if let Some(&pos) = seen.get(&next) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|&i| nodes[i].clone()).collect();
            cycle.push(nodes[next].clone());
            return Err(OntologyError::CycleDetected(cycle));
        }
        seen.insert(next, path.len());
        path.push(next);
        cur = next;
    }
}

pub const DATA_EDGES: &str = include_str!("../data/data_ontology.tsv");
pub const DATA_SYNONYMS: &str = include_str!("../data/data_synonyms.tsv");
pub const ENTITY_EDGES: &str = include_str!("../data/entity_ontology.tsv");
pub const ENTITY_SYNONYMS: &str = include_str!("../data/entity_synonyms.tsv");

/// The shipped data ontology.
pub fn bundled_data() -> Ontology {
    Ontology::parse(OntologyKind::Data, DATA_EDGES, Some(DATA_SYNONYMS), "data_ontology.tsv")
        .expect("bundled data ontology is valid")
}

/// The shipped entity ontology.
pub fn bundled_entity() -> Ontology {
    Ontology::parse(
        OntologyKind::Entity,
        ENTITY_EDGES,
        Some(ENTITY_SYNONYMS),
        "entity_ontology.tsv",
    )
    .expect("bundled entity ontology is valid")
}
