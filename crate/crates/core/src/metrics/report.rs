//! Aggregate audit report: data types by party, disclosure counts and
//! purpose tallies, rendered as long-format CSV, markdown and a JSON
//! histogram.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::consistency::{empty_histogram, summarize, Disclosure, DisclosureVerdict, Histogram};
use crate::destination::{index_labels, missed_by_blocklists, DestinationLabel, Party};
use crate::extract::{Category, DataFlow};
use crate::purpose::{FunctionalClass, PurposeLabel, PurposedFlow};

pub const PARTIES: [Party; 3] = [Party::First, Party::Third, Party::Platform];

fn party_name(p: Party) -> &'static str {
    match p {
        Party::First => "first",
        Party::Third => "third",
        Party::Platform => "platform",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartyCell {
    pub apps: BTreeSet<String>,
    pub fqdns: BTreeSet<String>,
    pub blocked: BTreeSet<String>,
}

impl PartyCell {
    fn add(&mut self, app: &str, fqdn: &str, ats: bool) {
        self.apps.insert(app.to_string());
        self.fqdns.insert(fqdn.to_string());
        if ats {
            self.blocked.insert(fqdn.to_string());
        }
    }

    /// Share of FQDNs on some blocklist, in percent.
    pub fn pct_blocked(&self) -> Option<f64> {
        (!self.fqdns.is_empty()).then(|| 100.0 * self.blocked.len() as f64 / self.fqdns.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTypeRow {
    pub data_type: String,
    /// `None` on the totals row.
    pub category: Option<Category>,
    pub parties: [PartyCell; 3],
    pub total: PartyCell,
}

/// Data type by party, ordered by category then name, plus a totals row
/// over unique apps and FQDNs. Empty input gives no rows at all.
pub fn data_type_table(flows: &[DataFlow], labels: &[DestinationLabel]) -> Vec<DataTypeRow> {
    let index = index_labels(labels);
    let mut rows: BTreeMap<(Category, String), DataTypeRow> = BTreeMap::new();
    let mut total = DataTypeRow {
        data_type: "Total".into(),
        category: None,
        parties: Default::default(),
        total: PartyCell::default(),
    };
    for f in flows {
        let Some(l) = index.get(&(f.app.clone(), f.destination.clone())) else {
            log::warn!("no destination label for {} -> {}", f.app, f.destination);
            continue;
        };
        let p = PARTIES.iter().position(|&p| p == l.party).expect("known party");
        let row = rows
            .entry((f.category, f.data_type.clone()))
            .or_insert_with(|| DataTypeRow {
                data_type: f.data_type.clone(),
                category: Some(f.category),
                parties: Default::default(),
                total: PartyCell::default(),
            });
        for cell in [
            &mut row.parties[p],
            &mut row.total,
            &mut total.parties[p],
            &mut total.total,
        ] {
            cell.add(&f.app, &f.destination, l.ats);
        }
    }
    let mut out: Vec<DataTypeRow> = rows.into_values().collect();
    if !out.is_empty() {
        out.push(total);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PurposeSummary {
    pub by_purpose: BTreeMap<PurposeLabel, usize>,
    pub core: usize,
    pub unrelated: usize,
    /// Consistent flows with no concrete purpose.
    pub unspecific: usize,
}

pub fn purpose_summary(verdicts: &[DisclosureVerdict], purposed: &[PurposedFlow]) -> PurposeSummary {
    let mut by_purpose = BTreeMap::new();
    let (mut core, mut unrelated) = (0, 0);
    let mut with_purpose = BTreeSet::new();
    for r in purposed {
        *by_purpose.entry(r.purpose).or_default() += 1;
        match r.functional_class {
            FunctionalClass::Core => core += 1,
            FunctionalClass::Unrelated => unrelated += 1,
            FunctionalClass::Unspecific => {}
        }
        with_purpose.insert((r.app.as_str(), r.data_type.as_str(), r.destination.as_str()));
    }
    let unspecific = verdicts
        .iter()
        .filter(|v| v.is_consistent())
        .filter(|v| !with_purpose.contains(&(v.app.as_str(), v.data_type.as_str(), v.destination.as_str())))
        .count();
    PurposeSummary {
        by_purpose,
        core,
        unrelated,
        unspecific,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBundle {
    pub csv: String,
    pub markdown: String,
    /// Pretty JSON object with a count for every disclosure class.
    pub histogram: String,
}

enum Value {
    Int(usize),
    Pct(Option<f64>),
    Text(String),
}

impl Value {
    fn csv(&self) -> String {
        match self {
            Value::Int(n) => n.to_string(),
            Value::Pct(Some(x)) => x.to_string(),
            Value::Pct(None) => String::new(),
            Value::Text(s) => s.clone(),
        }
    }

    fn md(&self) -> String {
        match self {
            Value::Int(n) => n.to_string(),
            Value::Pct(Some(x)) => format!("{x:.0}%"),
            Value::Pct(None) => "-".into(),
            Value::Text(s) => s.replace('|', "\\|"),
        }
    }
}

struct Table {
    name: &'static str,
    title: &'static str,
    key_header: &'static str,
    columns: Vec<String>,
    rows: Vec<(String, Vec<Value>)>,
}

fn histogram_values(h: &Histogram) -> Vec<Value> {
    Disclosure::ALL
        .iter()
        .map(|d| Value::Int(h.get(d).copied().unwrap_or(0)))
        .collect()
}

fn disclosure_columns() -> Vec<String> {
    Disclosure::ALL.iter().map(|d| d.as_str().to_string()).collect()
}

pub fn aggregate_report(
    flows: &[DataFlow],
    labels: &[DestinationLabel],
    verdicts: &[DisclosureVerdict],
    purposed: &[PurposedFlow],
) -> ReportBundle {
    let mut tables = Vec::new();

    let mut columns = vec!["category".to_string()];
    for p in PARTIES.iter().map(|&p| party_name(p)).chain(["total"]) {
        for c in ["apps", "fqdns", "pct_blocked"] {
            columns.push(format!("{p}.{c}"));
        }
    }
    let rows = data_type_table(flows, labels)
        .into_iter()
        .map(|r| {
            let category = r.category.map(|c| c.as_str().to_string()).unwrap_or_default();
            let mut vals = vec![Value::Text(category)];
            for cell in r.parties.iter().chain([&r.total]) {
                vals.push(Value::Int(cell.apps.len()));
                vals.push(Value::Int(cell.fqdns.len()));
                vals.push(Value::Pct(cell.pct_blocked()));
            }
            (r.data_type, vals)
        })
        .collect();
    tables.push(Table {
        name: "data_types",
        title: "Data types by destination party",
        key_header: "data type",
        columns,
        rows,
    });

    let totals = summarize(verdicts);
    let mut overall = histogram_values(&totals.by_class);
    overall.push(Value::Int(totals.consistent));
    overall.push(Value::Int(totals.inconsistent));
    let mut overall_cols = disclosure_columns();
    overall_cols.extend(["consistent".to_string(), "inconsistent".to_string()]);
    tables.push(Table {
        name: "disclosure",
        title: "Disclosures",
        key_header: "scope",
        columns: overall_cols,
        rows: if verdicts.is_empty() {
            vec![]
        } else {
            vec![("all".into(), overall)]
        },
    });
    tables.push(Table {
        name: "disclosure_by_category",
        title: "Disclosures by data type category",
        key_header: "category",
        columns: disclosure_columns(),
        rows: totals
            .by_category
            .iter()
            .filter(|(_, h)| h.values().any(|&n| n > 0))
            .map(|(c, h)| (c.as_str().to_string(), histogram_values(h)))
            .collect(),
    });
    tables.push(Table {
        name: "disclosure_by_entity",
        title: "Disclosures by destination entity",
        key_header: "entity",
        columns: disclosure_columns(),
        rows: totals
            .by_entity
            .iter()
            .map(|(e, h)| (e.clone(), histogram_values(h)))
            .collect(),
    });

    let ps = purpose_summary(verdicts, purposed);
    let mut purpose_rows: Vec<(String, Vec<Value>)> = ps
        .by_purpose
        .iter()
        .map(|(p, &n)| {
            let class = match p.functional_class() {
                FunctionalClass::Core => "core",
                FunctionalClass::Unrelated => "unrelated",
                FunctionalClass::Unspecific => "unspecific",
            };
            (p.name().to_string(), vec![Value::Text(class.into()), Value::Int(n)])
        })
        .collect();
    if !verdicts.is_empty() {
        purpose_rows.push((
            "core total".into(),
            vec![Value::Text("core".into()), Value::Int(ps.core)],
        ));
        purpose_rows.push((
            "unrelated total".into(),
            vec![Value::Text("unrelated".into()), Value::Int(ps.unrelated)],
        ));
        purpose_rows.push((
            "unspecific flows".into(),
            vec![Value::Text("unspecific".into()), Value::Int(ps.unspecific)],
        ));
    }
    tables.push(Table {
        name: "purposes",
        title: "Purposes of consistent flows",
        key_header: "purpose",
        columns: vec!["class".into(), "records".into()],
        rows: purpose_rows,
    });

    tables.push(Table {
        name: "missed_by_blocklists",
        title: "Third-party FQDNs missed by blocklists",
        key_header: "fqdn",
        columns: vec!["entity".into(), "data_type_count".into(), "data_types".into()],
        rows: missed_by_blocklists(flows, labels)
            .into_iter()
            .map(|m| {
                let n = m.data_types.len();
                let types = m.data_types.into_iter().collect::<Vec<_>>().join(", ");
                (m.fqdn, vec![Value::Text(m.entity), Value::Int(n), Value::Text(types)])
            })
            .collect(),
    });

    ReportBundle {
        csv: render_csv(&tables),
        markdown: render_markdown(&tables),
        histogram: render_histogram(&totals.by_class),
    }
}

fn render_csv(tables: &[Table]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["table", "key", "column", "value"])
        .expect("in-memory write");
    for t in tables {
        for (key, vals) in &t.rows {
            for (col, v) in t.columns.iter().zip(vals) {
                w.write_record([t.name, key.as_str(), col.as_str(), v.csv().as_str()])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn render_markdown(tables: &[Table]) -> String {
    let mut out = String::from("# Audit report\n");
    for t in tables {
        let _ = write!(out, "\n## {}\n\n| {} |", t.title, t.key_header);
        for c in &t.columns {
            let _ = write!(out, " {} |", c);
        }
        out.push_str("\n|---|");
        for _ in &t.columns {
            out.push_str("---|");
        }
        out.push('\n');
        for (key, vals) in &t.rows {
            let _ = write!(out, "| {} |", key.replace('|', "\\|"));
            for v in vals {
                let _ = write!(out, " {} |", v.md());
            }
            out.push('\n');
        }
    }
    out
}

fn render_histogram(h: &Histogram) -> String {
    let mut full = empty_histogram();
    full.extend(h.iter().map(|(k, v)| (*k, *v)));
    let mut s = serde_json::to_string_pretty(&full).expect("plain map");
    s.push('\n');
    s
}
