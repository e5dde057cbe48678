//! Confusion counts, sensitivity/specificity at a threshold, ROC curves
//! and AUC.
//!
//! The prediction rule at threshold `t` is `score >= t`, so `t = 0` is the
//! all-positive operating point. Score ties are handled with the
//! Mann-Whitney 1/2 convention, which makes the trapezoidal AUC coincide
//! with the pairwise probability that a positive outscores a negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

/// Sensitivity and specificity at a fixed threshold. A degenerate
/// denominator yields `None` rather than a silent 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` points from (0,0) to (1,1), fpr non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Count the confusion table for `score >= t`.
pub fn confusion_at(
    scores: &[f64],
    labels: &[u8],
    t: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Validation(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(MetricsError::Validation("empty inputs".into()));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &y) in scores.iter().zip(labels.iter()) {
        let pred = s >= t;
        match (pred, y) {
            (true, 1) => c.tp += 1,
            (true, _) => c.fp += 1,
            (false, 1) => c.fn_ += 1,
            (false, _) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(sensitivity, specificity) = (tp/(tp+fn), tn/(tn+fp))`.
pub fn sensitivity_specificity(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let sens = if c.positives() > 0 {
        Some(c.tp as f64 / c.positives() as f64)
    } else {
        None
    };
    let spec = if c.negatives() > 0 {
        Some(c.tn as f64 / c.negatives() as f64)
    } else {
        None
    };
    (sens, spec)
}

/// Operating point at threshold `t`.
pub fn operating_point(
    scores: &[f64],
    labels: &[u8],
    t: f64,
) -> Result<OperatingPoint, MetricsError> {
    let counts = confusion_at(scores, labels, t)?;
    let (sensitivity, specificity) = sensitivity_specificity(&counts);
    Ok(OperatingPoint {
        threshold: t,
        sensitivity,
        specificity,
        counts,
    })
}

/// Build the ROC curve by sweeping the distinct score values and compute the
/// trapezoidal AUC. Requires both classes to be present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Validation(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::UndefinedAuc(format!(
            "need both classes, got {pos} positives / {neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::with_capacity(scores.len() + 2);
    points.push((0.0, 0.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        // Advance over the whole tie group so equal scores form one vertex.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    debug_assert_eq!(points.last(), Some(&(1.0, 1.0)));

    let mut auc = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// O(n^2) pairwise Mann-Whitney statistic: P(s+ > s-) + 1/2 P(s+ = s-).
///
/// Independent oracle for the trapezoidal AUC; kept simple on purpose.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 1)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::UndefinedAuc("need both classes".into()));
    }
    let mut total = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (pos.len() as f64 * neg.len() as f64))
}
