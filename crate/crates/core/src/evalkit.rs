//! Binary and multi-label metrics, seed averaging and result grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::emotaxonomy::{CoarseEmotion, EmotionVector, NUM_EMOTIONS};
use crate::error::{Error, Result};

/// Reference numbers the experiment reports are compared against.
pub mod reference {
    /// Prior best F1 on the minority-stress test set.
    pub const PRIOR_SOTA_MINORITY_F1: f64 = 75.0;
    pub const SINGLE_BASE_GENERAL_MINORITY_F1: f64 = 69.85;
    pub const MULTI_ROBUST_MENTAL_MINORITY_F1: f64 = 78.53;
    pub const SINGLE_BASE_GENERAL_STRESS_F1: f64 = 77.70;
    pub const MULTIALT_BASE_MENTAL_STRESS_F1: f64 = 80.80;
    pub const LABELER_MACRO_F1: f64 = 61.13;
    /// Single-Task stress F1 range at half the training data.
    pub const SINGLE_HALF_DATA_F1: (f64, f64) = (77.38, 78.13);
    pub const MULTI_HALF_DATA_MIN_F1: f64 = 80.0;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{a} predictions vs {b} gold labels")));
    }
    if a == 0 {
        return Err(Error::Metric("no examples to score".into()));
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn from_labels(preds: &[bool], golds: &[bool]) -> Result<Self> {
        check_lengths(preds.len(), golds.len())?;
        let mut c = Self::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// F1 as a percentage. Zero when precision + recall is zero, flagged.
    pub fn f1(&self) -> Score {
        let p_den = self.tp + self.fp;
        let r_den = self.tp + self.fn_;
        if self.tp == 0 {
            return Score {
                value: 0.0,
                degenerate: p_den == 0 || r_den == 0,
            };
        }
        // 2PR/(P+R) == 2tp / (2tp + fp + fn)
        Score {
            value: 100.0 * 2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64,
            degenerate: false,
        }
    }

    pub fn accuracy(&self) -> f64 {
        100.0 * (self.tp + self.tn) as f64 / self.total() as f64
    }
}

/// A percentage plus a flag for a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

pub fn binary_f1(preds: &[bool], golds: &[bool]) -> Result<Score> {
    Ok(ConfusionCounts::from_labels(preds, golds)?.f1())
}

pub fn accuracy(preds: &[bool], golds: &[bool]) -> Result<f64> {
    Ok(ConfusionCounts::from_labels(preds, golds)?.accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value: f64,
    pub per_label: Vec<(CoarseEmotion, Score)>,
}

impl MacroF1 {
    pub fn degenerate_labels(&self) -> Vec<CoarseEmotion> {
        self.per_label
            .iter()
            .filter(|(_, s)| s.degenerate)
            .map(|(l, _)| *l)
            .collect()
    }
}

/// Unweighted mean of the seven per-label binary F1 scores.
pub fn macro_f1(preds: &[EmotionVector], golds: &[EmotionVector]) -> Result<MacroF1> {
    check_lengths(preds.len(), golds.len())?;
    let mut per_label = Vec::with_capacity(NUM_EMOTIONS);
    for label in CoarseEmotion::ALL {
        let p: Vec<bool> = preds.iter().map(|v| v.get(label)).collect();
        let g: Vec<bool> = golds.iter().map(|v| v.get(label)).collect();
        per_label.push((label, binary_f1(&p, &g)?));
    }
    let value = per_label.iter().map(|(_, s)| s.value).sum::<f64>() / NUM_EMOTIONS as f64;
    Ok(MacroF1 { value, per_label })
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eval_set: String,
    pub n: usize,
    pub f1: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default)]
    pub degenerate: bool,
}

impl MetricReport {
    pub fn binary(eval_set: &str, preds: &[bool], golds: &[bool]) -> Result<Self> {
        let c = ConfusionCounts::from_labels(preds, golds)?;
        let f1 = c.f1();
        Ok(Self {
            eval_set: eval_set.to_string(),
            n: c.total(),
            f1: f1.value,
            accuracy: c.accuracy(),
            macro_f1: None,
            degenerate: f1.degenerate,
        })
    }

    /// Multi-label report: `f1` is the macro F1, `accuracy` the exact-match rate.
    pub fn emotion(eval_set: &str, preds: &[EmotionVector], golds: &[EmotionVector]) -> Result<Self> {
        let m = macro_f1(preds, golds)?;
        let exact = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
        Ok(Self {
            eval_set: eval_set.to_string(),
            n: preds.len(),
            f1: m.value,
            accuracy: 100.0 * exact as f64 / preds.len() as f64,
            macro_f1: Some(m.value),
            degenerate: !m.degenerate_labels().is_empty(),
        })
    }

    /// Arithmetic mean over seed runs.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Metric("mean of zero reports".into()))?;
        if reports.iter().any(|r| r.eval_set != first.eval_set) {
            return Err(Error::Metric("cannot average reports over different sets".into()));
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let macro_f1 = if reports.iter().all(|r| r.macro_f1.is_some()) {
            Some(reports.iter().filter_map(|r| r.macro_f1).sum::<f64>() / k)
        } else {
            None
        };
        Ok(Self {
            eval_set: first.eval_set.clone(),
            n: first.n,
            f1: avg(|r| r.f1),
            accuracy: avg(|r| r.accuracy),
            macro_f1,
            degenerate: reports.iter().any(|r| r.degenerate),
        })
    }
}

/// Rows by model, columns by encoder, each cell an F1/accuracy pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultsGrid {
    pub title: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, MetricReport>>,
    /// Extra reference row, e.g. a prior best F1 with no accuracy.
    pub reference: Option<(String, f64)>,
}

impl ResultsGrid {
    pub fn new(title: &str, rows: &[&str], cols: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            rows: rows.iter().map(|s| s.to_string()).collect(),
            cols: cols.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, row: &str, col: &str, report: MetricReport) {
        self.cells
            .entry(row.to_string())
            .or_default()
            .insert(col.to_string(), report);
    }

    pub fn get(&self, row: &str, col: &str) -> Option<&MetricReport> {
        self.cells.get(row).and_then(|r| r.get(col))
    }

    fn column_max(&self, col: &str, metric: fn(&MetricReport) -> f64) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| self.get(r, col))
            .map(|m| round2(metric(m)))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }

    /// Plain-text grid; column maxima wrapped in `**`, missing cells shown as `-`.
    pub fn render(&self) -> String {
        let metrics: [(&str, fn(&MetricReport) -> f64); 2] =
            [("F1", |m| m.f1), ("Acc", |m| m.accuracy)];
        let mut header = vec!["Model".to_string()];
        for c in &self.cols {
            for (name, _) in &metrics {
                header.push(format!("{c} {name}"));
            }
        }
        let mut body: Vec<Vec<String>> = Vec::new();
        for r in &self.rows {
            let mut line = vec![r.clone()];
            for c in &self.cols {
                let cell = self.get(r, c);
                for (_, metric) in &metrics {
                    line.push(match cell {
                        None => "-".to_string(),
                        Some(m) => {
                            let v = round2(metric(m));
                            if Some(v) == self.column_max(c, *metric) {
                                format!("**{v:.2}**")
                            } else {
                                format!("{v:.2}")
                            }
                        }
                    });
                }
            }
            body.push(line);
        }
        if let Some((name, f1)) = &self.reference {
            let mut line = vec![name.clone()];
            for _ in &self.cols {
                line.push(format!("{f1:.2}"));
                line.push("-".into());
            }
            body.push(line);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|l| l[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let fmt_line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let _ = writeln!(out, "{}", fmt_line(&header));
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for l in &body {
            let _ = writeln!(out, "{}", fmt_line(l));
        }
        out
    }

    /// One JSON record per present cell.
    pub fn records(&self) -> Vec<serde_json::Value> {
        let mut v = Vec::new();
        for r in &self.rows {
            for c in &self.cols {
                if let Some(m) = self.get(r, c) {
                    v.push(serde_json::json!({
                        "grid": self.title,
                        "model": r,
                        "encoder": c,
                        "f1": round2(m.f1),
                        "accuracy": round2(m.accuracy),
                        "macro_f1": m.macro_f1.map(round2),
                        "n": m.n,
                        "eval_set": m.eval_set,
                        "degenerate": m.degenerate,
                    }));
                }
            }
        }
        v
    }

    pub fn present_cells(&self) -> usize {
        self.cells.values().map(BTreeMap::len).sum()
    }
}
