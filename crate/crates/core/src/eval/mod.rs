//! Confusion counts, precision/recall/F metrics and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::Ctx;
use crate::tensor::Tape;

/// Binary confusion counts; the positive class is the cancer class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionCounts {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        Self { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    /// Counts with the roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.tp, self.fn_, self.fp, self.tn)
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self::new(
            self.tn + other.tn,
            self.fp + other.fp,
            self.fn_ + other.fn_,
            self.tp + other.tp,
        )
    }
}

/// Accumulates counts from predicted and true class indices (1 = positive).
pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (1, 1) => c.tp += 1,
            _ => return Err(Error::Contract(format!("non-binary class pair ({p}, {y})"))),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

/// Per-class, macro and support-weighted metrics. Undefined ratios are 0.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Contract("metrics of empty confusion counts".into()));
    }
    let positive = class(c.tp, c.fp, c.fn_);
    let negative = class(c.tn, c.fn_, c.fp);
    let avg = |f: fn(&ClassMetrics) -> f64| (f(&positive) + f(&negative)) / 2.0;
    let wavg = |f: fn(&ClassMetrics) -> f64| {
        (f(&positive) * positive.support as f64 + f(&negative) * negative.support as f64)
            / total as f64
    };
    Ok(MetricsReport {
        positive,
        negative,
        macro_avg: Averages {
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
        },
        weighted_avg: Averages {
            precision: wavg(|m| m.precision),
            recall: wavg(|m| m.recall),
            f1: wavg(|m| m.f1),
        },
        accuracy: ratio(c.tp + c.tn, total),
        counts: *c,
    })
}

/// One named row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub architecture: String,
    pub approach: String,
    pub report: MetricsReport,
}

/// Fixed-width table (macro averages and confusion counts) plus the
/// structured JSON holding every value.
pub fn render_report(entries: &[ReportEntry]) -> Result<(String, String)> {
    if entries.is_empty() {
        return Err(Error::Contract("no reports to render".into()));
    }
    let aw = entries
        .iter()
        .map(|e| e.architecture.len())
        .max()
        .unwrap_or(0)
        .max(18);
    let pw = entries
        .iter()
        .map(|e| e.approach.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<aw$}  {:<pw$}  {:>9}  {:>6}  {:>7}  {:>5}  {:>5}  {:>5}  {:>5}",
        "Model Architecture", "Approach", "Precision", "Recall", "F-Score", "TN", "FP", "FN", "TP"
    );
    let _ = writeln!(t, "{}", "-".repeat(aw + pw + 67));
    for e in entries {
        let (m, c) = (&e.report.macro_avg, &e.report.counts);
        let _ = writeln!(
            t,
            "{:<aw$}  {:<pw$}  {:>9.2}  {:>6.2}  {:>7.2}  {:>5}  {:>5}  {:>5}  {:>5}",
            e.architecture, e.approach, m.precision, m.recall, m.f1, c.tn, c.fp, c.fn_, c.tp
        );
    }
    let json = serde_json::to_string_pretty(entries).map_err(|e| Error::Contract(e.to_string()))?;
    Ok((t, json))
}

pub fn parse_reports(json: &str) -> Result<Vec<ReportEntry>> {
    serde_json::from_str(json).map_err(|e| Error::Contract(format!("report file: {e}")))
}

/// Positive-class probabilities in eval mode, `batch_size` sequences at a time.
pub fn predict_proba(model: &Model, inputs: &[Vec<usize>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, model.store());
        let probs = model.classify(&ctx, chunk)?.softmax_rows()?.value();
        out.extend(probs.chunks_exact(2).map(|r| r[1]));
    }
    Ok(out)
}

/// Argmax class per input (ties go to the negative class).
pub fn predict(model: &Model, inputs: &[Vec<usize>], batch_size: usize) -> Result<Vec<usize>> {
    Ok(predict_proba(model, inputs, batch_size)?
        .into_iter()
        .map(|p| usize::from(p > 0.5))
        .collect())
}

/// Predicts and scores against `labels`.
pub fn evaluate(model: &Model, inputs: &[Vec<usize>], labels: &[usize]) -> Result<MetricsReport> {
    metrics(&confusion(&predict(model, inputs, 64)?, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let labels: Vec<usize> = (0..1000).map(|i| usize::from(i < 31)).collect();
        assert_eq!(
            confusion(&labels, &labels).unwrap(),
            ConfusionCounts::new(969, 0, 0, 31)
        );
        assert!(confusion(&[0], &[0, 1]).is_err());
        assert!(confusion(&[2], &[0]).is_err());
    }

    #[test]
    fn perfect_counts() {
        let r = metrics(&ConfusionCounts::new(969, 0, 0, 31)).unwrap();
        for v in [
            r.positive.precision,
            r.positive.recall,
            r.positive.f1,
            r.negative.f1,
            r.macro_avg.f1,
            r.weighted_avg.precision,
            r.accuracy,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_conventions() {
        let r = metrics(&ConfusionCounts::new(10, 0, 5, 0)).unwrap();
        assert_eq!(
            (r.positive.precision, r.positive.recall, r.positive.f1),
            (0.0, 0.0, 0.0)
        );
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn hand_computed_adapter_row() {
        let r = metrics(&ConfusionCounts::new(965, 4, 0, 31)).unwrap();
        assert!((r.positive.precision - 31.0 / 35.0).abs() < 1e-12);
        let f_pos = 2.0 * (31.0 / 35.0) / (31.0 / 35.0 + 1.0);
        let f_neg = 2.0 * (965.0 / 969.0) / (965.0 / 969.0 + 1.0);
        assert!((r.macro_avg.f1 - (f_pos + f_neg) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip() {
        let e = ReportEntry {
            architecture: "Encoder".into(),
            approach: "Adapter".into(),
            report: metrics(&ConfusionCounts::new(965, 4, 0, 31)).unwrap(),
        };
        let (table, json) = render_report(std::slice::from_ref(&e)).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert_eq!(parse_reports(&json).unwrap(), vec![e]);
        assert!(json.contains("\"fn\": 0"));
        assert!(render_report(&[]).is_err());
    }
}
