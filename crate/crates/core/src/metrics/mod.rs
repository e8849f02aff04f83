//! Threshold metrics, chance-corrected agreement, calibration and ranking
//! curves for binary classifiers.

mod curves;
mod report;

use serde::{Deserialize, Serialize};

pub use self::curves::{pr_curve, roc_curve_auc, PrPoint, RocPoint};
pub use self::report::{evaluate, MetricsReport, TABLE_COLUMNS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no predictions")]
    Empty,
    #[error("prediction {index}: score {score} is not a probability")]
    InvalidScore { index: usize, score: f64 },
    #[error("prediction {index}: label {label} is not 0 or 1")]
    InvalidLabel { index: usize, label: u8 },
    #[error("{0} needs at least one positive and one negative label")]
    SingleClass(&'static str),
    #[error("{0} needs at least one positive label")]
    NoPositives(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    /// Probability of the positive class.
    pub score: f64,
    /// 1 for Pneumonia, 0 for Normal.
    pub label: u8,
}

impl ScoredPrediction {
    pub fn new(score: f64, label: u8) -> Self {
        Self { score, label }
    }

    fn positive(&self) -> bool {
        self.label == 1
    }
}

pub(crate) fn validate(preds: &[ScoredPrediction]) -> Result<(), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, p) in preds.iter().enumerate() {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(MetricsError::InvalidScore { index, score: p.score });
        }
        if p.label > 1 {
            return Err(MetricsError::InvalidLabel { index, label: p.label });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }
}

/// Counts outcomes with `score >= threshold` meaning predicted positive.
pub fn confusion(preds: &[ScoredPrediction], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    validate(preds)?;
    let mut cm = ConfusionMatrix::default();
    for p in preds {
        match (p.score >= threshold, p.positive()) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Accuracy, precision, recall and F1. A ratio whose denominator is zero is
/// reported as 0 and its flag is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> BasicMetrics {
    let (accuracy, _) = ratio(cm.tp + cm.tn, cm.total());
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    // 2PR/(P+R) written in counts, which is exact and defined whenever tp > 0
    let (f1, f1_undefined) = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_);
    let f1_undefined = f1_undefined || precision_undefined || recall_undefined;
    BasicMetrics { accuracy, precision, recall, f1, precision_undefined, recall_undefined, f1_undefined }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`; 0 when chance agreement is 1.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let po = (cm.tp + cm.tn) as f64 / n;
    let pred_pos = (cm.tp + cm.fp) as f64 / n;
    let true_pos = cm.positives() as f64 / n;
    let pe = pred_pos * true_pos + (1.0 - pred_pos) * (1.0 - true_pos);
    if (1.0 - pe).abs() < 1e-15 {
        return 0.0;
    }
    ((po - pe) / (1.0 - pe)).clamp(-1.0, 1.0)
}

/// Mean squared difference between score and label.
pub fn brier(preds: &[ScoredPrediction]) -> Result<f64, MetricsError> {
    validate(preds)?;
    Ok(preds.iter().map(|p| (p.score - p.label as f64).powi(2)).sum::<f64>() / preds.len() as f64)
}
