//! Confusion-matrix accumulation and the ordinal evaluation suite:
//! per-class and macro precision/recall/F1, aggregate accuracy, and
//! quadratic weighted kappa.

use std::fmt;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrices have different sizes ({lhs} vs {rhs})")]
    SizeMismatch { lhs: usize, rhs: usize },
    #[error("confusion matrix is empty; metrics need at least one count")]
    EmptyMatrix,
    #[error("confusion matrix CSV row {row} has {got} columns, expected {expected}")]
    RaggedCsv {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("confusion matrix CSV: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Square count matrix with rows indexed by actual class and columns by
/// classified class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::SizeMismatch {
                lhs: classes * classes,
                rhs: counts.len(),
            });
        }
        Ok(Self { classes, counts })
    }

    /// Parse an N by N integer CSV, rows = actual class.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self, MetricsError> {
        let mut rows: Vec<Vec<u64>> = Vec::new();
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        for record in csv.records() {
            let record = record.map_err(|e| MetricsError::BadCsv(e.to_string()))?;
            let row: Vec<u64> = record
                .iter()
                .map(|field| {
                    field
                        .parse::<u64>()
                        .map_err(|_| MetricsError::BadCsv(format!("not a count: {field:?}")))
                })
                .collect::<Result<_, _>>()?;
            rows.push(row);
        }
        let classes = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(MetricsError::RaggedCsv {
                    row: i,
                    got: row.len(),
                    expected: classes,
                });
            }
        }
        Ok(Self {
            classes,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn accumulate(&mut self, actual: usize, predicted: usize) -> Result<(), MetricsError> {
        for label in [actual, predicted] {
            if label >= self.classes {
                return Err(MetricsError::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[actual * self.classes + predicted] += 1;
        Ok(())
    }

    /// Entrywise sum; confusion matrices over disjoint shards merge into
    /// the matrix of the union.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::SizeMismatch {
                lhs: self.classes,
                rhs: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.count(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|i| (0..self.classes).map(|j| self.count(i, j)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.count(i, j)).sum())
            .collect()
    }
}

/// Precision, recall, and F1 for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Full evaluation report over a confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub weighted_kappa: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision/recall/F1 plus their unweighted macro averages.
/// Classes with a zero denominator score 0 rather than NaN.
pub fn precision_recall_f1(
    cm: &ConfusionMatrix,
) -> Result<(Vec<ClassMetrics>, f64, f64, f64), MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class: Vec<ClassMetrics> = (0..cm.classes)
        .map(|c| {
            let tp = cm.count(c, c) as f64;
            let precision = ratio(tp, cols[c] as f64);
            let recall = ratio(tp, rows[c] as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let k = cm.classes as f64;
    let mp = per_class.iter().map(|m| m.precision).sum::<f64>() / k;
    let mr = per_class.iter().map(|m| m.recall).sum::<f64>() / k;
    let mf = per_class.iter().map(|m| m.f1).sum::<f64>() / k;
    Ok((per_class, mp, mr, mf))
}

/// Aggregate multiclass accuracy: trace over total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Quadratic weighted kappa: 1 minus the weighted observed disagreement
/// over the weighted chance disagreement, with expected counts from the
/// marginal products and weights `(i - j)^2 / (classes - 1)^2`.
pub fn weighted_kappa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..cm.classes {
        for j in 0..cm.classes {
            let w = ((i as f64) - (j as f64)).powi(2);
            observed += w * cm.count(i, j) as f64;
            expected += w * (rows[i] as f64) * (cols[j] as f64) / total as f64;
        }
    }
    // The (classes - 1)^2 normalization cancels between numerator and
    // denominator, so it is omitted from both.
    if expected == 0.0 {
        eprintln!("warning: weighted kappa undefined for single-class marginals, reporting 0");
        return Ok(0.0);
    }
    Ok(1.0 - observed / expected)
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let (per_class, macro_precision, macro_recall, macro_f1) = precision_recall_f1(cm)?;
    Ok(MetricsReport {
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        accuracy: accuracy(cm)?,
        weighted_kappa: weighted_kappa(cm)?,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>10} {:>10}", "class", "precision", "recall", "f1")?;
        for (c, m) in self.per_class.iter().enumerate() {
            writeln!(
                f,
                "{:<10} {:>10.4} {:>10.4} {:>10.4}",
                c, m.precision, m.recall, m.f1
            )?;
        }
        writeln!(
            f,
            "{:<10} {:>10.4} {:>10.4} {:>10.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        )?;
        writeln!(f, "{:<10} {:>10.4}", "accuracy", self.accuracy)?;
        write!(f, "{:<10} {:>10.4}", "wks", self.weighted_kappa)
    }
}

impl MetricsReport {
    /// One JSON object per line, one line per metric.
    pub fn to_json_lines(&self) -> String {
        let mut lines = Vec::new();
        for (c, m) in self.per_class.iter().enumerate() {
            lines.push(
                serde_json::json!({"metric": "precision", "class": c, "value": m.precision})
                    .to_string(),
            );
            lines.push(
                serde_json::json!({"metric": "recall", "class": c, "value": m.recall})
                    .to_string(),
            );
            lines.push(
                serde_json::json!({"metric": "f1", "class": c, "value": m.f1}).to_string(),
            );
        }
        for (name, value) in [
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("accuracy", self.accuracy),
            ("weighted_kappa", self.weighted_kappa),
        ] {
            lines.push(serde_json::json!({"metric": name, "value": value}).to_string());
        }
        lines.join("\n")
    }
}
