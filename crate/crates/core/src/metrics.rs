//! Classification metric primitives: confusion matrices, accuracy,
//! one-vs-rest sensitivity/specificity, tie-aware ROC curves with
//! trapezoidal AUC, and the macro one-vs-rest multi-class AUC.
//!
//! Counts are exact integers; all ratio arithmetic is `f64`. Metrics
//! with an empty denominator are reported as undefined (`None`) with an
//! explaining flag rather than a fabricated zero, so that thin
//! demographic strata cannot masquerade as zero performance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("input lengths differ: {truths} truths vs {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("label `{0}` is not in the vocabulary")]
    UnknownLabel(String),
    #[error("no scored cases")]
    EmptyInput,
    #[error("scores contain only one truth class")]
    SingleClass,
    #[error("no label has a defined AUC")]
    AllUndefined,
}

/// Why a metric value is undefined or should be read with care.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum MetricFlag {
    /// Scores were 0/1 indicators from a class-only submission.
    DegenerateScores,
    /// A label (or the whole cell) had no positives or no negatives.
    SingleClass,
    /// The cell holds fewer cases than the configured minimum.
    BelowMinN,
}

/// Row = true label, column = predicted label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(
        truths: &[&str],
        predictions: &[&str],
        vocabulary: &[String],
    ) -> Result<Self, MetricsError> {
        if truths.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch {
                truths: truths.len(),
                predictions: predictions.len(),
            });
        }
        let index_of = |label: &str| {
            vocabulary
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))
        };
        let k = vocabulary.len();
        let mut counts = vec![vec![0u64; k]; k];
        for (truth, pred) in truths.iter().zip(predictions) {
            counts[index_of(truth)?][index_of(pred)?] += 1;
        }
        Ok(ConfusionMatrix {
            labels: vocabulary.to_vec(),
            counts,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn count(&self, true_idx: usize, pred_idx: usize) -> u64 {
        self.counts[true_idx][pred_idx]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Fraction of correctly classified cases.
    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::EmptyInput),
            total => Ok(self.trace() as f64 / total as f64),
        }
    }

    /// One-vs-rest sensitivity and specificity for `label`. Either side
    /// is `None` when its denominator is zero.
    pub fn sensitivity_specificity(
        &self,
        label: &str,
    ) -> Result<(Option<f64>, Option<f64>), MetricsError> {
        let idx = self
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))?;
        let k = self.labels.len();
        let tp = self.counts[idx][idx];
        let fn_: u64 = (0..k).filter(|j| *j != idx).map(|j| self.counts[idx][j]).sum();
        let fp: u64 = (0..k).filter(|i| *i != idx).map(|i| self.counts[i][idx]).sum();
        let tn = self.total() - tp - fn_ - fp;
        let sensitivity = match tp + fn_ {
            0 => None,
            den => Some(tp as f64 / den as f64),
        };
        let specificity = match tn + fp {
            0 => None,
            den => Some(tn as f64 / den as f64),
        };
        Ok((sensitivity, specificity))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with grouped thresholds: one point per distinct score,
/// swept descending, with `(0,0)` prepended. `thresholds[i]` is the
/// score that produced `points[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    /// Builds the curve from per-case scores and binary truths.
    ///
    /// Ties share a single threshold, which makes the trapezoidal area
    /// equal to the pairwise statistic P(pos > neg) + P(tie)/2.
    pub fn from_scores(scores: &[f64], truths: &[bool]) -> Result<Self, MetricsError> {
        if scores.len() != truths.len() {
            return Err(MetricsError::LengthMismatch {
                truths: truths.len(),
                predictions: scores.len(),
            });
        }
        let positives = truths.iter().filter(|t| **t).count();
        let negatives = truths.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(MetricsError::SingleClass);
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

        let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
        let mut thresholds = Vec::new();
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut i = 0;
        while i < order.len() {
            let threshold = scores[order[i]];
            // consume the whole tie group at this threshold
            while i < order.len() && scores[order[i]] == threshold {
                if truths[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(RocPoint {
                fpr: fp as f64 / negatives as f64,
                tpr: tp as f64 / positives as f64,
            });
            thresholds.push(threshold);
        }
        Ok(RocCurve { points, thresholds })
    }

    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }
}

/// Convenience: AUC of `label`-vs-rest directly from scores.
pub fn binary_auc(scores: &[f64], truths: &[bool]) -> Result<f64, MetricsError> {
    RocCurve::from_scores(scores, truths).map(|c| c.auc())
}

/// Per-label one-vs-rest AUCs and their unweighted macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrAuc {
    /// One entry per vocabulary label; `None` when that label has no
    /// positive or no negative case.
    pub per_label: Vec<Option<f64>>,
    /// Mean over the defined per-label AUCs.
    pub macro_auc: f64,
    pub flags: BTreeSet<MetricFlag>,
}

/// Scores each label one-vs-rest and macro-averages the defined AUCs.
/// `scores_by_label[k]` must align with `truths` case-for-case.
pub fn macro_ovr_auc(
    scores_by_label: &[Vec<f64>],
    truths: &[&str],
    vocabulary: &[String],
) -> Result<OvrAuc, MetricsError> {
    if scores_by_label.len() != vocabulary.len() {
        return Err(MetricsError::LengthMismatch {
            truths: vocabulary.len(),
            predictions: scores_by_label.len(),
        });
    }
    for truth in truths {
        if !vocabulary.iter().any(|l| l == truth) {
            return Err(MetricsError::UnknownLabel(truth.to_string()));
        }
    }
    let mut per_label = Vec::with_capacity(vocabulary.len());
    let mut flags = BTreeSet::new();
    for (label, scores) in vocabulary.iter().zip(scores_by_label) {
        if scores.len() != truths.len() {
            return Err(MetricsError::LengthMismatch {
                truths: truths.len(),
                predictions: scores.len(),
            });
        }
        let binary: Vec<bool> = truths.iter().map(|t| *t == label).collect();
        match RocCurve::from_scores(scores, &binary) {
            Ok(curve) => per_label.push(Some(curve.auc())),
            Err(MetricsError::SingleClass) => {
                per_label.push(None);
                flags.insert(MetricFlag::SingleClass);
            }
            Err(other) => return Err(other),
        }
    }
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined);
    }
    Ok(OvrAuc {
        per_label,
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        flags,
    })
}

/// Per-label slice of a [`MetricReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

/// Full metric set for one evaluated group of cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub per_label: Vec<LabelMetrics>,
    pub macro_auc: Option<f64>,
    pub flags: BTreeSet<MetricFlag>,
}

/// Computes the full report for one group of cases.
///
/// Degenerate conditions surface as `None` values plus a flag; the only
/// hard errors are structural (length or vocabulary mismatches).
pub fn evaluate_group(
    truths: &[&str],
    predictions: &[&str],
    scores_by_label: &[Vec<f64>],
    vocabulary: &[String],
    degenerate_scores: bool,
) -> Result<MetricReport, MetricsError> {
    let cm = ConfusionMatrix::from_pairs(truths, predictions, vocabulary)?;
    let mut flags = BTreeSet::new();
    if degenerate_scores {
        flags.insert(MetricFlag::DegenerateScores);
    }
    let accuracy = match cm.accuracy() {
        Ok(value) => Some(value),
        Err(MetricsError::EmptyInput) => None,
        Err(other) => return Err(other),
    };
    let ovr = match macro_ovr_auc(scores_by_label, truths, vocabulary) {
        Ok(ovr) => {
            flags.extend(ovr.flags.iter().copied());
            Some(ovr)
        }
        Err(MetricsError::AllUndefined) => {
            flags.insert(MetricFlag::SingleClass);
            None
        }
        Err(other) => return Err(other),
    };
    let mut per_label = Vec::with_capacity(vocabulary.len());
    for (idx, label) in vocabulary.iter().enumerate() {
        let (sensitivity, specificity) = cm.sensitivity_specificity(label)?;
        per_label.push(LabelMetrics {
            label: label.clone(),
            sensitivity,
            specificity,
            auc: ovr.as_ref().and_then(|o| o.per_label[idx]),
        });
    }
    Ok(MetricReport {
        n: truths.len(),
        accuracy,
        per_label,
        macro_auc: ovr.map(|o| o.macro_auc),
        flags,
    })
}
