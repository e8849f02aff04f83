use serde::{Deserialize, Serialize};

use super::{validate, MetricsError, ScoredPrediction};

/// One operating point. `threshold` is `None` for the sentinel above every
/// score, where nothing is predicted positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// Cumulative (tp, fp) counts after admitting each distinct score, highest first.
fn sweep(preds: &[ScoredPrediction]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<&ScoredPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, p) in sorted.iter().enumerate() {
        if p.positive() {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = sorted.get(i + 1).is_none_or(|next| next.score != p.score);
        if last_of_tie {
            out.push((p.score, tp, fp));
        }
    }
    out
}

/// ROC points for every distinct score used as a `>=` threshold, preceded by
/// the (0, 0) sentinel, and the trapezoidal area under them. Ties move both
/// rates in one diagonal step, so the area credits tied pairs with 1/2.
pub fn roc_curve_auc(preds: &[ScoredPrediction]) -> Result<(Vec<RocPoint>, f64), MetricsError> {
    validate(preds)?;
    let pos = preds.iter().filter(|p| p.positive()).count() as u64;
    let neg = preds.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass("ROC"));
    }
    let steps = sweep(preds);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    // twice the area in units of one positive-negative pair, kept exact
    let mut doubled: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for &(t, tp, fp) in &steps {
        doubled += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: Some(t) });
        (prev_tp, prev_fp) = (tp, fp);
    }
    let auc = doubled as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((points, auc))
}

/// (recall, precision) at every distinct score used as a `>=` threshold,
/// highest threshold first, so recall is nondecreasing. The last point
/// predicts everything positive: recall 1, precision equal to prevalence.
pub fn pr_curve(preds: &[ScoredPrediction]) -> Result<Vec<PrPoint>, MetricsError> {
    validate(preds)?;
    let pos = preds.iter().filter(|p| p.positive()).count() as u64;
    if pos == 0 {
        return Err(MetricsError::NoPositives("precision-recall curve"));
    }
    Ok(sweep(preds)
        .into_iter()
        .map(|(t, tp, fp)| PrPoint {
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold: t,
        })
        .collect())
}
