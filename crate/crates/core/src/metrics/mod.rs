//! Confusion matrices and precision/recall/F1 averaging, plus the
//! aggregate audit report.

pub mod report;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::Disclosure;

pub use report::{aggregate_report, ReportBundle};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("confusion matrix must be square with one row per label")]
    NotSquare,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
}

/// Rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(MetricsError::NotSquare);
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(MetricsError::DuplicateLabel(l.clone()));
            }
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn zeros(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Tallies `(gold, predicted)` pairs.
    pub fn from_pairs<'a>(
        labels: Vec<String>,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, MetricsError> {
        let mut cm = Self::zeros(labels);
        for (g, p) in pairs {
            let gi = cm.index(g)?;
            let pi = cm.index(p)?;
            cm.counts[gi][pi] += 1;
        }
        Ok(cm)
    }

    fn index(&self, label: &str) -> Result<usize, MetricsError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    /// Row sum.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Column sum.
    pub fn predicted(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    /// Merges the labels in `positive` into one class and the rest into
    /// another, giving a 2x2 matrix ordered `[positive, negative]`.
    pub fn fold(&self, positive: &BTreeSet<String>, pos_name: &str, neg_name: &str) -> Result<Self, MetricsError> {
        for p in positive {
            self.index(p)?;
        }
        let side = |i: usize| if positive.contains(&self.labels[i]) { 0 } else { 1 };
        let mut counts = vec![vec![0; 2]; 2];
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                counts[side(g)][side(p)] += n;
            }
        }
        Ok(ConfusionMatrix {
            labels: vec![pos_name.to_string(), neg_name.to_string()],
            counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    /// `None` when nothing was predicted as this label.
    pub precision: Option<f64>,
    /// `None` when the label has no gold samples.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<MetricRow> {
    (0..cm.labels.len())
        .map(|i| {
            let tp = cm.true_positives(i);
            let precision = ratio(tp, cm.predicted(i));
            let recall = ratio(tp, cm.support(i));
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) => Some(harmonic(p, r)),
                _ => None,
            };
            MetricRow {
                label: cm.labels[i].clone(),
                precision,
                recall,
                f1,
                support: cm.support(i),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro averages from pooled counts. For a single-label matrix every
/// error is one false positive and one false negative, so the three agree.
pub fn micro(cm: &ConfusionMatrix) -> Option<Averages> {
    let n = cm.labels.len();
    let tp: u64 = (0..n).map(|i| cm.true_positives(i)).sum();
    let fp: u64 = (0..n).map(|i| cm.predicted(i) - cm.true_positives(i)).sum();
    let fn_: u64 = (0..n).map(|i| cm.support(i) - cm.true_positives(i)).sum();
    let precision = ratio(tp, tp + fp)?;
    let recall = ratio(tp, tp + fn_)?;
    let f1 = harmonic(precision, recall);
    assert!(
        (precision - recall).abs() < 1e-12 && (precision - f1).abs() < 1e-12,
        "micro averages diverge on a single-label matrix"
    );
    Some(Averages { precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroF1 {
    /// Harmonic mean of macro precision and macro recall.
    #[default]
    HarmonicOfMeans,
    /// Arithmetic mean of per-class F1.
    MeanOfClassF1,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Unweighted means over classes. Undefined entries are left out of their
/// own mean.
pub fn macro_average(rows: &[MetricRow], rule: MacroF1) -> Option<Averages> {
    let ps: Vec<f64> = rows.iter().filter_map(|r| r.precision).collect();
    let rs: Vec<f64> = rows.iter().filter_map(|r| r.recall).collect();
    if ps.len() < rows.len() || rs.len() < rows.len() {
        log::warn!("macro average skips classes with undefined precision or recall");
    }
    let precision = mean(&ps)?;
    let recall = mean(&rs)?;
    let f1 = match rule {
        MacroF1::HarmonicOfMeans => harmonic(precision, recall),
        MacroF1::MeanOfClassF1 => mean(&rows.iter().filter_map(|r| r.f1).collect::<Vec<_>>())?,
    };
    Some(Averages { precision, recall, f1 })
}

pub const CONSISTENT: &str = "consistent";
pub const INCONSISTENT: &str = "inconsistent";

/// Validation label of a disclosure class: clear and vague collapse into
/// `consistent`.
pub fn validation_label(d: Disclosure) -> &'static str {
    if d.is_consistent() {
        CONSISTENT
    } else {
        d.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub matrix: ConfusionMatrix,
    pub rows: Vec<MetricRow>,
    pub macro_avg: Option<Averages>,
    pub micro_avg: Option<Averages>,
    pub binary: Vec<MetricRow>,
}

/// Multi-class rows and averages, plus the binary view in which the
/// labels in `inconsistent` form the positive class.
pub fn validate(
    cm: &ConfusionMatrix,
    inconsistent: &BTreeSet<String>,
    rule: MacroF1,
) -> Result<ValidationReport, MetricsError> {
    let rows = per_class_metrics(cm);
    let binary_cm = cm.fold(inconsistent, INCONSISTENT, CONSISTENT)?;
    Ok(ValidationReport {
        matrix: cm.clone(),
        macro_avg: macro_average(&rows, rule),
        micro_avg: micro(cm),
        rows,
        binary: per_class_metrics(&binary_cm),
    })
}
