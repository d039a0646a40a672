//! Accuracy / precision / recall / F1 over answer predictions.

use crate::error::{Error, Result};

/// Metrics for one experimental condition, as percentages. Precision,
/// recall, and F1 are binary with respect to a positive label; accuracy
/// counts exact matches over all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub condition: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
    pub total: usize,
}

impl MetricsReport {
    pub fn with_condition(mut self, label: &str) -> Self {
        self.condition = label.to_string();
        self
    }

    /// Two-decimal rendering used by every report surface.
    pub fn row(&self) -> [String; 4] {
        [
            format!("{:.2}", self.accuracy),
            format!("{:.2}", self.precision),
            format!("{:.2}", self.recall),
            format!("{:.2}", self.f1),
        ]
    }
}

/// Harmonic mean of precision and recall (percent in, percent out); zero
/// when both are zero.
pub fn f1_from_precision_recall(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Score predictions against golds. Lengths must match and be non-empty.
pub fn metrics(predictions: &[String], golds: &[String], positive_label: &str) -> Result<MetricsReport> {
    if predictions.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            context: "metrics inputs",
            expected: golds.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Precondition("metrics need at least one prediction".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    let mut correct = 0usize;
    for (p, g) in predictions.iter().zip(golds) {
        if p == g {
            correct += 1;
        }
        match (p == positive_label, g == positive_label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let pct = |num: usize, den: usize| -> f64 {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fn_);
    Ok(MetricsReport {
        condition: String::new(),
        accuracy: pct(correct, predictions.len()),
        precision,
        recall,
        f1: f1_from_precision_recall(precision, recall),
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        true_neg: tn,
        total: predictions.len(),
    })
}
