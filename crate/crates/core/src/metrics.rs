//! Screening metrics: F1, recall, precision, AUC, Sum and Cost.
//!
//! Sum is the mean of recall and specificity (in percent); Cost weighs missed positives at 0.9
//! and false alarms at 0.1. Both are locked by [`verify_reference_table`], which recovers the
//! integer confusion counts behind each published row and recomputes its Sum and Cost.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::inference::{self, Prediction};
use crate::networks::ModelBundle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    pub fn negatives(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts with class 1 as the positive (disease) class.
pub fn confusion(predicted: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 0) => c.true_neg += 1,
            (0, 1) => c.false_neg += 1,
            _ => return Err(Error::Input(format!("non-binary entry ({p}, {t})"))),
        }
    }
    Ok(c)
}

/// `(precision%, recall%, f1%)`, with `0/0` taken as 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = ratio(c.true_pos, c.positives());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (100.0 * precision, 100.0 * recall, 100.0 * f1)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    100.0 * ratio(c.true_neg, c.negatives())
}

/// Mean of recall and specificity, in percent.
pub fn sum_metric(c: &ConfusionCounts) -> f64 {
    let (_, recall, _) = precision_recall_f1(c);
    (recall + specificity(c)) / 2.0
}

pub const COST_FALSE_NEGATIVE: f64 = 0.9;
pub const COST_FALSE_POSITIVE: f64 = 0.1;

/// Weighted misclassification count `c_fn * FN + c_fp * FP`.
pub fn cost_metric(c: &ConfusionCounts, c_fn: f64, c_fp: f64) -> Result<f64> {
    if !(c_fn >= 0.0 && c_fp >= 0.0) {
        return Err(Error::Input(format!("cost weights must be nonnegative: {c_fn}, {c_fp}")));
    }
    Ok(c_fn * c.false_neg as f64 + c_fp * c.false_pos as f64)
}

/// Probability that a random positive outscores a random negative (ties count one half).
///
/// Computed from average ranks, which equals the trapezoidal area under the ROC curve.
pub fn auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if let Some(t) = truth.iter().find(|&&t| t > 1) {
        return Err(Error::Input(format!("non-binary label {t}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let n_pos = truth.iter().filter(|&&t| t == 1).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| truth[k] == 1).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// The six screening metrics plus the raw counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub auc: f64,
    pub sum: f64,
    pub cost: f64,
    pub specificity: f64,
    pub counts: ConfusionCounts,
}

pub fn round_to(x: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (x * s).round() / s
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, auc: f64) -> Self {
        let (precision, recall, f1) = precision_recall_f1(&counts);
        MetricsReport {
            f1,
            recall,
            precision,
            auc,
            sum: sum_metric(&counts),
            cost: cost_metric(&counts, COST_FALSE_NEGATIVE, COST_FALSE_POSITIVE)
                .expect("default weights are nonnegative"),
            specificity: specificity(&counts),
            counts,
        }
    }

    /// Values at presentation precision: 2 decimals for percentages, 3 for AUC, 1 for Cost.
    pub fn rounded(&self) -> Self {
        MetricsReport {
            f1: round_to(self.f1, 2),
            recall: round_to(self.recall, 2),
            precision: round_to(self.precision, 2),
            auc: round_to(self.auc, 3),
            sum: round_to(self.sum, 2),
            cost: round_to(self.cost, 1),
            specificity: round_to(self.specificity, 2),
            counts: self.counts,
        }
    }

    /// Flat `key=value` record.
    pub fn to_kv_line(&self) -> String {
        let r = self.rounded();
        format!(
            "f1={:.2} recall={:.2} precision={:.2} auc={:.3} sum={:.2} cost={:.1} specificity={:.2} tp={} fp={} tn={} fn={}",
            r.f1,
            r.recall,
            r.precision,
            r.auc,
            r.sum,
            r.cost,
            r.specificity,
            r.counts.true_pos,
            r.counts.false_pos,
            r.counts.true_neg,
            r.counts.false_neg
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv_line())
    }
}

/// Metrics from predictions against true labels.
pub fn report_from_predictions(preds: &[Prediction], truth: &[u8]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let hard: Vec<u8> = preds.iter().map(|p| p.hard_label.index() as u8).collect();
    let counts = confusion(&hard, truth)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.positive_score).collect();
    let auc = auc(&scores, truth)?;
    Ok(MetricsReport::from_counts(counts, auc))
}

/// Target-domain predictions on a labeled test set, scored.
pub fn evaluate(bundle: &ModelBundle, test_set: &[Example]) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let truth = test_set
        .iter()
        .map(|e| {
            e.label
                .map(|l| l.index() as u8)
                .ok_or_else(|| Error::Input(format!("test example {} is unlabeled", e.id)))
        })
        .collect::<Result<Vec<u8>>>()?;
    let preds = inference::predict_target_batch(bundle, test_set.iter().map(|e| e.features.as_slice()))?;
    report_from_predictions(&preds, &truth)
}

// ---------------------------------------------------------------------------------------------
// published-table oracle

/// One published results row (percentages except AUC and Cost).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub auc: f64,
    pub sum: f64,
    pub cost: f64,
}

pub const REFERENCE_POSITIVES: u64 = 60;
pub const REFERENCE_NEGATIVES: u64 = 885;

const fn row(
    method: &'static str,
    f1: f64,
    recall: f64,
    precision: f64,
    auc: f64,
    sum: f64,
    cost: f64,
) -> ReferenceRow {
    ReferenceRow {
        method,
        f1,
        recall,
        precision,
        auc,
        sum,
        cost,
    }
}

/// Published comparison on the 945-image test set (60 COVID-19, 885 normal).
pub const REFERENCE_TABLE: [ReferenceRow; 12] = [
    row("Source-only", 65.04, 66.67, 63.49, 0.899, 82.03, 20.3),
    row("Target-only", 68.75, 55.00, 91.67, 0.971, 77.33, 24.6),
    row("Fine-tuning", 64.29, 75.00, 56.25, 0.946, 85.52, 17.0),
    row("DLAD", 67.18, 73.33, 61.97, 0.961, 85.14, 17.1),
    row("COVID-Net", 71.94, 83.33, 63.29, 0.977, 90.03, 11.9),
    row("MCD", 61.54, 60.00, 63.16, 0.904, 78.81, 23.7),
    row("DANN", 66.15, 71.67, 61.43, 0.904, 84.31, 18.0),
    row("DSN", 73.02, 76.67, 69.70, 0.884, 87.20, 14.6),
    row("DMAN", 75.63, 75.00, 76.27, 0.915, 86.71, 14.9),
    row("Semi-DMAN", 77.27, 85.00, 70.83, 0.978, 91.31, 10.2),
    row("SDT", 79.69, 85.00, 75.00, 0.962, 91.54, 9.8),
    row("COVID-DA", 92.98, 88.33, 98.15, 0.985, 94.11, 6.4),
];

pub const REFERENCE_TOLERANCE: f64 = 0.05;

/// All integer `(TP, FP)` whose recall and precision round (2 decimals) to the given values.
pub fn reconstruct_counts(recall: f64, precision: f64, positives: u64, negatives: u64) -> Vec<ConfusionCounts> {
    let half_ulp = 0.005 + 1e-9;
    let mut out = Vec::new();
    for tp in 0..=positives {
        let r = 100.0 * ratio(tp, positives);
        if (r - recall).abs() > half_ulp {
            continue;
        }
        for fp in 0..=negatives {
            let p = 100.0 * ratio(tp, tp + fp);
            if (p - precision).abs() <= half_ulp {
                out.push(ConfusionCounts {
                    true_pos: tp,
                    false_pos: fp,
                    true_neg: negatives - fp,
                    false_neg: positives - tp,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowCheck {
    pub method: &'static str,
    pub counts: Option<ConfusionCounts>,
    pub sum: f64,
    pub cost: f64,
    pub sum_residual: f64,
    pub cost_residual: f64,
    pub passed: bool,
}

/// Recovers each row's counts and recomputes Sum and Cost.
pub fn verify_rows(rows: &[ReferenceRow]) -> Vec<RowCheck> {
    rows.iter()
        .map(|r| {
            let candidates = reconstruct_counts(r.recall, r.precision, REFERENCE_POSITIVES, REFERENCE_NEGATIVES);
            match candidates.as_slice() {
                [c] => {
                    let sum = sum_metric(c);
                    let cost = cost_metric(c, COST_FALSE_NEGATIVE, COST_FALSE_POSITIVE).expect("weights");
                    let sum_residual = sum - r.sum;
                    let cost_residual = cost - r.cost;
                    RowCheck {
                        method: r.method,
                        counts: Some(*c),
                        sum,
                        cost,
                        sum_residual,
                        cost_residual,
                        passed: sum_residual.abs() <= REFERENCE_TOLERANCE
                            && cost_residual.abs() <= REFERENCE_TOLERANCE,
                    }
                }
                // no or ambiguous reconstruction
                _ => RowCheck {
                    method: r.method,
                    counts: None,
                    sum: f64::NAN,
                    cost: f64::NAN,
                    sum_residual: f64::NAN,
                    cost_residual: f64::NAN,
                    passed: false,
                },
            }
        })
        .collect()
}

pub fn verify_reference_table() -> Vec<RowCheck> {
    verify_rows(&REFERENCE_TABLE)
}
