use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, write_config_echo, write_json, CommandError, GroundTruth, RunConfig};
use crate::data::{
    decode_image, load_sample, make_batches, normalize, resize_bilinear, scan_dataset, BatchOptions, ImageBuffer,
    Label, PreprocessConfig, SplitLoader,
};
use crate::gradcam::{gradcam, overlay, Heatmap};
use crate::lime::{explain, lime_overlay, LimeExplanation};
use crate::metrics::{evaluate, MetricsReport, ScoredPrediction};
use crate::model::{load_checkpoint, save_checkpoint, ForwardOptions, Network, NetworkSpec};
use crate::train::{fit, TrainLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAINLOG_FILE: &str = "trainlog.jsonl";

fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CommandError> {
    value.as_ref().ok_or_else(|| CommandError::Config(format!("{key} is not set")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
    pub param_count: usize,
    /// Validation accuracy of the epoch whose weights were kept.
    pub best_val_accuracy: f64,
}

/// Trains `preset` on `{dataset_root}/train`, validating on `val`, and
/// writes `model.ckpt` (best validation loss), `trainlog.jsonl`,
/// `train_summary.json` and the config echo.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CommandError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let root = required(&cfg.dataset_root, "dataset_root")?;
    let out = cfg.out_dir()?.to_path_buf();
    let manifest = scan_dataset(root)?;
    let spec = NetworkSpec::preset(&cfg.preset, cfg.preprocess.target_size)?;
    let net = Network::from_seed(spec, cfg.train.seed)?;
    write_config_echo(&out, "train", &cfg)?;

    let train = SplitLoader {
        samples: manifest.split("train")?.to_vec(),
        cfg: cfg.preprocess.clone(),
        opts: BatchOptions::training(cfg.train.batch_size),
    };
    // validation images never change between epochs, so decode them once
    let val = make_batches(manifest.split("val")?, &cfg.preprocess, BatchOptions::evaluation(cfg.train.batch_size), 0)?;

    let log_path = out.join(TRAINLOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let (net, log) = fit(net, &train, &val, &cfg.train, Some(&mut writer))?;
    drop(writer);

    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&net, &checkpoint)?;
    let best_val_accuracy = log.epochs.get(log.best_epoch.saturating_sub(1)).map_or(0.0, |r| r.val_accuracy);
    let outcome = TrainOutcome { param_count: net.param_count(), checkpoint, best_val_accuracy, log };
    write_json(&out.join("train_summary.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalSource {
    /// Score `split` of the dataset with a trained network.
    Checkpoint { checkpoint: PathBuf, dataset_root: PathBuf, split: String },
    /// Labelled scores from a CSV file with `label` and `score` columns.
    Scores(PathBuf),
}

impl EvalSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CommandError> {
        if let Some(s) = &cfg.scores {
            return Ok(EvalSource::Scores(s.clone()));
        }
        Ok(EvalSource::Checkpoint {
            checkpoint: required(&cfg.checkpoint, "checkpoint (or scores)")?.clone(),
            dataset_root: required(&cfg.dataset_root, "dataset_root")?.clone(),
            split: cfg.eval_split.clone(),
        })
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ScoreRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    label: u8,
    score: f64,
}

/// Reads a CSV of `label` (0/1) and `score` columns; other columns are
/// ignored.
pub fn read_score_file(path: &Path) -> Result<Vec<ScoredPrediction>, CommandError> {
    let bad = |detail: String| CommandError::ScoreFile { path: path.to_path_buf(), detail };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        out.push(ScoredPrediction::new(row.score, row.label));
    }
    if out.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok(out)
}

/// Writes `path,label,score` rows (the path column only when names are given).
pub fn write_score_file(path: &Path, preds: &[ScoredPrediction], names: Option<&[String]>) -> Result<(), CommandError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for (i, p) in preds.iter().enumerate() {
        let row = ScoreRow { path: names.map(|n| n[i].clone()), label: p.label, score: p.score };
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub label: String,
    /// Markdown header and one row, every metric to 4 decimals.
    pub table: String,
}

fn score_split(
    net: &Network,
    root: &Path,
    split: &str,
    pre: &PreprocessConfig,
) -> Result<(Vec<ScoredPrediction>, Vec<String>), CommandError> {
    let manifest = scan_dataset(root)?;
    let pre = PreprocessConfig { target_size: net.spec().input_shape[1], ..pre.clone() };
    let batches = make_batches(manifest.split(split)?, &pre, BatchOptions::evaluation(32), 0)?;
    let mut preds = Vec::new();
    let mut names = Vec::new();
    for b in &batches {
        let out = net.infer(&b.images, ForwardOptions::default())?;
        for ((p, y), path) in out.probs.iter().zip(b.labels.data()).zip(&b.paths) {
            preds.push(ScoredPrediction::new(*p as f64, (*y > 0.5) as u8));
            names.push(path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/"));
        }
    }
    Ok((preds, names))
}

/// Computes the full metrics report and writes `metrics.json`, `roc.csv`,
/// `pr.csv`, `confusion.json` (plus `predictions.csv` when scoring a
/// checkpoint) and the config echo.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateOutcome, CommandError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let source = EvalSource::from_config(&cfg)?;
    let (preds, names, label) = match &source {
        EvalSource::Scores(path) => (read_score_file(path)?, None, "scores".to_string()),
        EvalSource::Checkpoint { checkpoint, dataset_root, split } => {
            let net = load_checkpoint(checkpoint)?;
            let (preds, names) = score_split(&net, dataset_root, split, &cfg.preprocess)?;
            (preds, Some(names), cfg.preset.clone())
        }
    };
    let report = evaluate(&preds, cfg.threshold)?;
    write_config_echo(&out, "evaluate", &cfg)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_json(&out.join("confusion.json"), &report.confusion)?;

    let roc_path = out.join("roc.csv");
    let mut roc = csv::Writer::from_path(&roc_path).map_err(|e| io_err(&roc_path, e))?;
    roc.write_record(["fpr", "tpr", "threshold"]).map_err(|e| io_err(&roc_path, e))?;
    for p in &report.roc_points {
        let t = p.threshold.map_or_else(String::new, |t| t.to_string());
        roc.write_record([p.fpr.to_string(), p.tpr.to_string(), t]).map_err(|e| io_err(&roc_path, e))?;
    }
    roc.flush().map_err(|e| io_err(&roc_path, e))?;

    let pr_path = out.join("pr.csv");
    let mut pr = csv::Writer::from_path(&pr_path).map_err(|e| io_err(&pr_path, e))?;
    pr.write_record(["recall", "precision", "threshold"]).map_err(|e| io_err(&pr_path, e))?;
    for p in &report.pr_points {
        pr.write_record([p.recall.to_string(), p.precision.to_string(), p.threshold.to_string()])
            .map_err(|e| io_err(&pr_path, e))?;
    }
    pr.flush().map_err(|e| io_err(&pr_path, e))?;

    if let Some(names) = &names {
        write_score_file(&out.join("predictions.csv"), &preds, Some(names))?;
    }
    let table = format!("{}\n{}", MetricsReport::table_header(), report.table_row(&label));
    Ok(EvaluateOutcome { report, label, table })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    Gradcam,
    Lime,
    Both,
}

impl ExplainMethod {
    pub const NAMES: [&'static str; 3] = ["gradcam", "lime", "both"];

    fn gradcam(self) -> bool {
        self != ExplainMethod::Lime
    }

    fn lime(self) -> bool {
        self != ExplainMethod::Gradcam
    }
}

impl FromStr for ExplainMethod {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gradcam" => Ok(ExplainMethod::Gradcam),
            "lime" => Ok(ExplainMethod::Lime),
            "both" => Ok(ExplainMethod::Both),
            other => Err(CommandError::Config(format!(
                "unknown explain method '{other}'; valid methods: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcamSummary {
    pub target_layer: String,
    pub explained_class: String,
    pub logit: f32,
    pub class_score: f32,
    /// Row and column of the hottest pixel at input resolution.
    pub argmax: (usize, usize),
    pub raw_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ExplainOutcome {
    pub method: ExplainMethod,
    /// Positive-class probability of the unperturbed image.
    pub probability: f64,
    pub heatmap: Option<Heatmap>,
    pub lime: Option<LimeExplanation>,
    pub files: Vec<PathBuf>,
}

/// Decodes `path` and resizes it to the network input.
fn model_view(path: &Path, size: usize) -> Result<ImageBuffer, CommandError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let img = decode_image(&bytes)?;
    Ok(resize_bilinear(&img, size, size)?)
}

/// Explains the network's positive-class score for one image with Grad-CAM,
/// LIME or both. Writes `heatmap.png`, `overlay.png`, `gradcam.json`
/// (optionally `heatmap.csv`) and/or `lime.json`, `lime_overlay.png`, plus
/// the config echo.
pub fn cmd_explain(cfg: &RunConfig) -> Result<ExplainOutcome, CommandError> {
    let method: ExplainMethod = cfg.explain_method.parse()?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let net = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let size = net.spec().input_shape[1];
    let pre = PreprocessConfig { target_size: size, ..cfg.preprocess.clone() };
    let view = model_view(required(&cfg.image, "image")?, size)?;
    let input = normalize(&view, &pre)?;
    write_config_echo(&out, "explain", &cfg)?;

    let probability =
        net.infer(&input.clone().reshape(vec![1, 3, size, size])?, ForwardOptions::default())?.probs[0] as f64;
    let mut files = Vec::new();
    let save_png = |files: &mut Vec<PathBuf>, name: &str, img: &ImageBuffer| -> Result<(), CommandError> {
        let path = out.join(name);
        fs::write(&path, img.encode_png()?).map_err(|e| io_err(&path, e))?;
        files.push(path);
        Ok(())
    };

    let heatmap = if method.gradcam() {
        let hm = gradcam(&net, &input, cfg.gradcam_layer.as_deref())?;
        save_png(&mut files, "heatmap.png", &hm.to_image())?;
        save_png(&mut files, "overlay.png", &overlay(&hm, &view, cfg.overlay_alpha)?)?;
        let summary = GradcamSummary {
            target_layer: hm.target_layer.clone(),
            explained_class: hm.explained_class.clone(),
            logit: hm.logit,
            class_score: hm.class_score,
            argmax: hm.argmax(),
            raw_shape: hm.raw.shape().to_vec(),
        };
        write_json(&out.join("gradcam.json"), &summary)?;
        files.push(out.join("gradcam.json"));
        if cfg.heatmap_csv {
            let path = out.join("heatmap.csv");
            fs::write(&path, hm.to_csv()).map_err(|e| io_err(&path, e))?;
            files.push(path);
        }
        Some(hm)
    } else {
        None
    };

    let lime = if method.lime() {
        let predict = |img: &ImageBuffer| -> Result<f64, CommandError> {
            let t = normalize(img, &pre)?.reshape(vec![1, 3, size, size])?;
            Ok(net.infer(&t, ForwardOptions::default())?.probs[0] as f64)
        };
        let (sp, expl) = explain(predict, &view, &cfg.lime)?;
        write_json(&out.join("lime.json"), &expl)?;
        files.push(out.join("lime.json"));
        save_png(&mut files, "lime_overlay.png", &lime_overlay(&view, &sp, &expl, cfg.lime.top_k))?;
        Some(expl)
    } else {
        None
    };
    Ok(ExplainOutcome { method, probability, heatmap, lime, files })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub total: usize,
    pub hits: usize,
    /// Relative paths whose Grad-CAM peak fell outside the quadrant.
    pub misses: Vec<String>,
}

impl LocalizationReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// For every positive image of `split` listed in `truth`, checks whether
/// the Grad-CAM peak lies in the planted quadrant.
pub fn gradcam_localization(
    net: &Network,
    root: &Path,
    split: &str,
    truth: &GroundTruth,
    pre: &PreprocessConfig,
) -> Result<LocalizationReport, CommandError> {
    let size = net.spec().input_shape[1];
    let pre = PreprocessConfig { target_size: size, ..pre.clone() };
    let manifest = scan_dataset(root)?;
    let positives: Vec<_> = manifest.split(split)?.iter().filter(|s| s.label == Label::Pneumonia).cloned().collect();
    let results: Vec<Result<(String, bool), CommandError>> = positives
        .par_iter()
        .map(|s| {
            let rel = s.path.strip_prefix(root).unwrap_or(&s.path).to_string_lossy().replace('\\', "/");
            if !truth.blobs.contains_key(&rel) {
                return Err(CommandError::Config(format!("{rel} has no ground-truth entry")));
            }
            let input = load_sample(s, &pre, None)?;
            let hm = gradcam(net, &input, None)?;
            let (row, col) = hm.argmax();
            let scale = truth.image_size as f64 / size as f64;
            let hit = truth.quadrant.contains((col as f64 + 0.5) * scale, (row as f64 + 0.5) * scale, truth.image_size);
            Ok((rel, hit))
        })
        .collect();
    let mut report = LocalizationReport { total: 0, hits: 0, misses: Vec::new() };
    for r in results {
        let (rel, hit) = r?;
        report.total += 1;
        if hit {
            report.hits += 1;
        } else {
            report.misses.push(rel);
        }
    }
    Ok(report)
}
