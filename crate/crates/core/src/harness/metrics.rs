use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOP_N: [usize; 4] = [1, 2, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when a zero denominator forced one of the scores to 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Top-N accuracy for every requested N that does not exceed the class
    /// count.
    pub top_n: BTreeMap<usize, f64>,
    /// Human-readable notes, e.g. skipped Top-N values.
    pub notes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Rank of class `y` in `probs` (0 = best); higher probability first, lower
/// index first among equals.
pub fn rank_of(probs: &[f64], y: usize) -> usize {
    probs
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p > probs[y] || (p == probs[y] && j < y))
        .count()
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl Metrics {
    /// Metrics of probability rows against true labels over `c` classes.
    pub fn from_predictions(probs: &[Vec<f64>], labels: &[usize], c: usize) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptySplit);
        }
        if probs.len() != labels.len() || probs.iter().any(|p| p.len() != c) || labels.iter().any(|&y| y >= c) {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions, {} labels, {c} classes",
                probs.len(),
                labels.len()
            )));
        }
        let n = probs.len() as f64;
        let mut top_n = BTreeMap::new();
        let mut notes = Vec::new();
        for k in TOP_N {
            if k > c {
                notes.push(format!("top-{k} skipped: only {c} classes"));
                continue;
            }
            let hits = probs.iter().zip(labels).filter(|(p, &y)| rank_of(p, y) < k).count();
            top_n.insert(k, hits as f64 / n);
        }
        let mut confusion = vec![vec![0; c]; c];
        for (p, &y) in probs.iter().zip(labels) {
            confusion[y][crate::nn::argmax(p)] += 1;
        }
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let predicted: usize = (0..c).map(|r| confusion[r][k]).sum();
                let support: usize = confusion[k].iter().sum();
                let (precision, d1) = ratio(tp, predicted);
                let (recall, d2) = ratio(tp, support);
                let (f1, d3) = if precision + recall == 0.0 {
                    (0.0, true)
                } else {
                    (2.0 * precision * recall / (precision + recall), false)
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                    degenerate: d1 || d2 || d3,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        Ok(Metrics {
            top_n,
            notes,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        })
    }

    pub fn top1(&self) -> f64 {
        self.top_n[&1]
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fold: usize,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(fold: usize, epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            fold,
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

pub const CSV_HEADER: &str = "fold,epoch,split,metric,value";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.fold, r.epoch, r.split, r.metric, r.value));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!("{} lacks the metrics header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("malformed metrics line `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRow {
                fold: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                split: f[2].to_string(),
                metric: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
