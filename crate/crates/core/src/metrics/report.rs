use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    basic_metrics, brier, cohens_kappa, confusion, mcc, pr_curve, roc_curve_auc, validate, ConfusionMatrix,
    MetricsError, PrPoint, RocPoint, ScoredPrediction,
};

/// Everything reported for one scored split. Values stay at full precision;
/// `rounded` carries the 4-decimal presentation strings. A metric that is
/// undefined for the split is `null` and `undefined` says why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub n: usize,
    pub positives: u64,
    pub negatives: u64,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
    pub kappa: Option<f64>,
    pub brier: f64,
    pub roc_auc: Option<f64>,
    pub roc_points: Vec<RocPoint>,
    pub pr_points: Vec<PrPoint>,
    pub undefined: BTreeMap<String, String>,
    pub rounded: BTreeMap<String, Option<String>>,
}

/// Column order of [`MetricsReport::table_row`].
pub const TABLE_COLUMNS: [&str; 8] = ["Accuracy", "Precision", "Recall", "F1", "MCC", "Kappa", "ROC-AUC", "Brier"];

pub fn evaluate(preds: &[ScoredPrediction], threshold: f64) -> Result<MetricsReport, MetricsError> {
    validate(preds)?;
    let cm = confusion(preds, threshold)?;
    let basic = basic_metrics(&cm);
    let mut undefined = BTreeMap::new();
    let mut keep = |name: &str, value: f64, bad: bool, why: &str| {
        if bad {
            undefined.insert(name.to_string(), why.to_string());
            None
        } else {
            Some(value)
        }
    };
    let single = cm.positives() == 0 || cm.negatives() == 0;
    let single_why = if cm.positives() == 0 { "split has no positive labels" } else { "split has no negative labels" };
    let precision = keep("precision", basic.precision, basic.precision_undefined, "no predicted positives");
    let recall = keep("recall", basic.recall, basic.recall_undefined, "split has no positive labels");
    let f1 = keep("f1", basic.f1, basic.f1_undefined, "precision or recall undefined");
    let mcc = keep("mcc", mcc(&cm), single, single_why);
    let kappa = keep("kappa", cohens_kappa(&cm), single, single_why);
    let (roc_points, roc_auc) = match roc_curve_auc(preds) {
        Ok((p, a)) => (p, Some(a)),
        Err(e) => {
            undefined.insert("roc_auc".into(), e.to_string());
            (Vec::new(), None)
        }
    };
    let pr_points = match pr_curve(preds) {
        Ok(p) => p,
        Err(e) => {
            undefined.insert("pr_curve".into(), e.to_string());
            Vec::new()
        }
    };
    let brier = brier(preds)?;
    let mut report = MetricsReport {
        threshold,
        n: preds.len(),
        positives: cm.positives(),
        negatives: cm.negatives(),
        confusion: cm,
        accuracy: basic.accuracy,
        precision,
        recall,
        f1,
        mcc,
        kappa,
        brier,
        roc_auc,
        roc_points,
        pr_points,
        undefined,
        rounded: BTreeMap::new(),
    };
    report.rounded = report.scalars().into_iter().map(|(k, v)| (k.to_string(), v.map(|x| format!("{x:.4}")))).collect();
    Ok(report)
}

impl MetricsReport {
    fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("mcc", self.mcc),
            ("kappa", self.kappa),
            ("roc_auc", self.roc_auc),
            ("brier", Some(self.brier)),
        ]
    }

    /// Column titles and the Markdown separator line.
    pub fn table_header() -> String {
        let titles = format!("| {:<14} | {} |", "Model", TABLE_COLUMNS.map(|c| format!("{c:>9}")).join(" | "));
        let rule = format!("|{}|{}", "-".repeat(16), "----------:|".repeat(TABLE_COLUMNS.len()));
        format!("{titles}\n{rule}")
    }

    /// One Markdown table row with every metric rounded to 4 decimals
    /// (`n/a` where undefined).
    pub fn table_row(&self, label: &str) -> String {
        let cells: Vec<String> = self
            .scalars()
            .iter()
            .map(|(_, v)| v.map_or_else(|| format!("{:>9}", "n/a"), |x| format!("{x:>9.4}")))
            .collect();
        format!("| {label:<14} | {} |", cells.join(" | "))
    }
}
