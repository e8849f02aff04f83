//! Independent reference implementations for the evaluation metrics.
#![allow(dead_code)]

use lungscope::metrics::ScoredPrediction;

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
pub fn pair_auc(preds: &[ScoredPrediction]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in preds.iter().filter(|p| p.label == 1) {
        for n in preds.iter().filter(|p| p.label == 0) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Accuracy, precision, recall, F1, MCC and Cohen's kappa from counts.
/// Kappa goes through observed and chance agreement; MCC through the
/// correlation of the two indicator vectors.
pub fn count_metrics(tp: f64, fp: f64, fn_: f64, tn: f64) -> [f64; 6] {
    let n = tp + fp + fn_ + tn;
    let accuracy = (tp + tn) / n;
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
    // Pearson correlation of truth and prediction
    let (mt, mp) = ((tp + fn_) / n, (tp + fp) / n);
    let cov = tp / n - mt * mp;
    let mcc = cov / (mt * (1.0 - mt) * mp * (1.0 - mp)).sqrt();
    let chance = mt * mp + (1.0 - mt) * (1.0 - mp);
    let kappa = (accuracy - chance) / (1.0 - chance);
    [accuracy, precision, recall, f1, mcc, kappa]
}

/// Predictions realising a confusion matrix at threshold 0.5.
pub fn preds_from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Vec<ScoredPrediction> {
    let mut v = Vec::new();
    v.extend((0..tp).map(|_| ScoredPrediction::new(0.9, 1)));
    v.extend((0..fp).map(|_| ScoredPrediction::new(0.8, 0)));
    v.extend((0..fn_).map(|_| ScoredPrediction::new(0.2, 1)));
    v.extend((0..tn).map(|_| ScoredPrediction::new(0.1, 0)));
    v
}
