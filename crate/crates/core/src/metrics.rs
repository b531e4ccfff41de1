//! Precision, recall, F1 and the confusion matrix.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Label, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsOptions {
    pub average: Average,
    /// Whether `others` takes part in the summary score.
    pub include_others: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            average: Average::Macro,
            include_others: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ClassMetrics {
    /// P = 0 without predictions, R = 0 without support, F1 = 0 when P + R = 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    /// `confusion[truth][prediction]`.
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub summary: ClassMetrics,
    pub options: MetricsOptions,
}

impl MetricsReport {
    pub fn from_predictions(split: &str, truth: &[usize], predicted: &[usize], options: MetricsOptions) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Data(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(Error::Data(format!("class index out of range at record {i}: {t} / {p}")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(split, confusion, options))
    }

    pub fn from_confusion(split: &str, confusion: [[u64; NUM_CLASSES]; NUM_CLASSES], options: MetricsOptions) -> Self {
        let counts: Vec<(u64, u64, u64)> = (0..NUM_CLASSES)
            .map(|c| {
                let tp = confusion[c][c];
                let fp = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum::<u64>() - tp;
                let fn_ = confusion[c].iter().sum::<u64>() - tp;
                (tp, fp, fn_)
            })
            .collect();
        let per_class: [ClassMetrics; NUM_CLASSES] =
            std::array::from_fn(|c| ClassMetrics::from_counts(counts[c].0, counts[c].1, counts[c].2));
        let scored: Vec<usize> = (0..NUM_CLASSES)
            .filter(|&c| options.include_others || c != Label::Others.index())
            .collect();
        let summary = match options.average {
            Average::Macro => {
                let k = scored.len() as f64;
                let mean = |f: fn(&ClassMetrics) -> f64| scored.iter().map(|&c| f(&per_class[c])).sum::<f64>() / k;
                ClassMetrics {
                    precision: mean(|m| m.precision),
                    recall: mean(|m| m.recall),
                    f1: mean(|m| m.f1),
                    support: scored.iter().map(|&c| per_class[c].support).sum(),
                }
            }
            Average::Micro => {
                let sum = |f: fn(&(u64, u64, u64)) -> u64| scored.iter().map(|&c| f(&counts[c])).sum::<u64>();
                ClassMetrics::from_counts(sum(|c| c.0), sum(|c| c.1), sum(|c| c.2))
            }
        };
        Self {
            split: split.to_string(),
            confusion,
            per_class,
            summary,
            options,
        }
    }

    pub fn f1(&self) -> f64 {
        self.summary.f1
    }
}

pub const CSV_HEADER: [&str; 8] = ["run_id", "split", "ablation", "class", "precision", "recall", "f1", "support"];

/// One row per class plus a `macro` (or `micro`) summary row.
pub fn write_rows<W: Write>(out: &mut csv::Writer<W>, run_id: &str, ablation: &str, report: &MetricsReport) -> Result<()> {
    let summary = match report.options.average {
        Average::Macro => "macro",
        Average::Micro => "micro",
    };
    let rows = Label::ALL
        .iter()
        .map(|l| (l.as_str(), &report.per_class[l.index()]))
        .chain(std::iter::once((summary, &report.summary)));
    for (class, m) in rows {
        out.write_record([
            run_id,
            &report.split,
            ablation,
            class,
            &m.precision.to_string(),
            &m.recall.to_string(),
            &m.f1.to_string(),
            &m.support.to_string(),
        ])?;
    }
    Ok(())
}

pub fn write_csv(path: &std::path::Path, rows: &[(String, String, MetricsReport)]) -> Result<()> {
    let mut buf = csv::Writer::from_writer(Vec::new());
    buf.write_record(CSV_HEADER)?;
    for (run_id, ablation, report) in rows {
        write_rows(&mut buf, run_id, ablation, report)?;
    }
    let bytes = buf.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
