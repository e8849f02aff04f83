use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::{TrainConfig, TrainError};
use crate::data::{Batch, SplitLoader};
use crate::model::{ForwardOptions, Network};
use crate::tensor::{BnMode, Graph, Tensor};

/// A validation loss must drop by more than this to count as an improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-8;

/// Anything that can hand out the batches for a given epoch.
pub trait BatchSource {
    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Batch>, TrainError>;
}

impl BatchSource for [Batch] {
    fn epoch_batches(&self, _epoch: u64) -> Result<Vec<Batch>, TrainError> {
        Ok(self.to_vec())
    }
}

impl BatchSource for Vec<Batch> {
    fn epoch_batches(&self, _epoch: u64) -> Result<Vec<Batch>, TrainError> {
        Ok(self.clone())
    }
}

impl BatchSource for SplitLoader {
    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Batch>, TrainError> {
        Ok(self.batches(epoch)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

/// One line of `trainlog.jsonl`. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    /// True when this epoch set a new best validation loss.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainLog {
    /// The per-epoch records as JSON lines.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

/// Running best-loss tracker shared by early stopping and the scheduler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Improvement {
    pub best: f64,
    pub best_index: usize,
    /// Consecutive entries since the best, the best itself excluded.
    pub since_best: usize,
}

impl Improvement {
    pub fn scan(history: &[f64]) -> Option<Self> {
        let (&first, rest) = history.split_first()?;
        let mut s = Self { best: first, best_index: 0, since_best: 0 };
        for (i, &v) in rest.iter().enumerate() {
            if v < s.best - IMPROVEMENT_TOLERANCE {
                s = Self { best: v, best_index: i + 1, since_best: 0 };
            } else {
                s.since_best += 1;
            }
        }
        Some(s)
    }
}

/// Learning rate for the next epoch. Each time the best validation loss
/// has gone `plateau_patience` more epochs without improving, the rate is
/// multiplied by `plateau_factor`, never dropping below `min_lr` (and never
/// rising).
pub fn reduce_lr_on_plateau(history: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
    match Improvement::scan(history) {
        Some(s) if s.since_best > 0 && s.since_best % cfg.plateau_patience == 0 => {
            (lr * cfg.plateau_factor).max(cfg.min_lr).min(lr)
        }
        _ => lr,
    }
}

/// The protocol's view of a model: train for an epoch, validate, and keep
/// or restore a snapshot of the best state.
pub trait EpochRunner {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64, TrainError>;
    /// Validation loss and accuracy.
    fn validate(&mut self, epoch: usize) -> Result<(f64, f64), TrainError>;
    fn snapshot_best(&mut self, epoch: usize) -> Result<(), TrainError>;
    fn restore_best(&mut self) -> Result<(), TrainError>;
}

/// Epoch loop with early stopping and plateau scheduling. `on_epoch` sees
/// each record as soon as it exists, so logs survive a later failure.
pub fn run_protocol<R: EpochRunner + ?Sized>(
    runner: &mut R,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<(), TrainError>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let mut lr = cfg.learning_rate;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = runner.train_epoch(epoch, lr)?;
        let (val_loss, val_accuracy) = runner.validate(epoch)?;
        history.push(val_loss);
        let state = Improvement::scan(&history).expect("nonempty");
        let improved = state.best_index == history.len() - 1;
        if improved {
            runner.snapshot_best(epoch)?;
        }
        let record = EpochRecord { epoch, train_loss, val_loss, val_accuracy, learning_rate: lr, improved };
        on_epoch(&record)?;
        epochs.push(record);
        if state.since_best >= cfg.early_stop_patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
        lr = reduce_lr_on_plateau(&history, lr, cfg);
    }
    runner.restore_best()?;
    let best = Improvement::scan(&history).expect("at least one epoch ran");
    Ok(TrainLog { epochs, best_epoch: best.best_index + 1, best_val_loss: best.best, stop_reason })
}

fn class_weights(batches: &[Batch]) -> [f32; 2] {
    let mut counts = [0usize; 2];
    for b in batches {
        for &y in b.labels.data() {
            counts[(y > 0.5) as usize] += 1;
        }
    }
    let n = (counts[0] + counts[1]) as f32;
    counts.map(|c| if c == 0 { 1.0 } else { n / (2.0 * c as f32) })
}

/// One pass of forward, BCE, backward and Adam over `batches` in order.
/// Returns the batch-size-weighted mean training loss.
pub fn train_epoch(
    net: &mut Network,
    batches: &[Batch],
    adam: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyBatches("train on"));
    }
    let weights = cfg.class_weighting.then(|| class_weights(batches));
    let mut params = net.params().clone();
    let mut stats = net.running_stats().clone();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for batch in batches {
        let mut g = Graph::new();
        let vars: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let input = g.constant(batch.images.clone());
        let trace = crate::model::forward(
            net.spec(),
            &mut g,
            input,
            &vars,
            &mut stats,
            BnMode::Train,
            ForwardOptions::default(),
        )?;
        let loss = match weights {
            Some(w) => {
                let per: Vec<f32> = batch.labels.data().iter().map(|&y| w[(y > 0.5) as usize]).collect();
                g.weighted_bce_loss(trace.probs, &batch.labels, &per)?
            }
            None => g.bce_loss(trace.probs, &batch.labels)?,
        };
        g.backward(loss)?;
        let grads: BTreeMap<String, Vec<f32>> =
            vars.iter().map(|(k, &v)| (k.clone(), g.grad(v).expect("param grad").to_vec())).collect();
        adam_step(&mut params, &grads, adam, lr, cfg)?;
        total += g.value(loss).item() as f64 * batch.len() as f64;
        count += batch.len();
    }
    for (name, t) in params {
        net.set_param(&name, t)?;
    }
    net.set_running_stats(stats);
    Ok(total / count as f64)
}

/// Mean BCE and accuracy (a probability of exactly 0.5 counts as positive)
/// in eval mode. The network is not modified.
pub fn evaluate_loss(net: &Network, batches: &[Batch]) -> Result<(f64, f64), TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyBatches("evaluate"));
    }
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for batch in batches {
        let out = net.infer(&batch.images, ForwardOptions::default())?;
        let mut g = Graph::<f32>::new();
        let p = g.constant(Tensor::new(vec![out.probs.len()], out.probs.clone())?);
        let loss = g.bce_loss(p, &batch.labels)?;
        total += g.value(loss).item() as f64 * batch.len() as f64;
        correct += out.probs.iter().zip(batch.labels.data()).filter(|&(&p, &y)| (p >= 0.5) == (y > 0.5)).count();
        count += batch.len();
    }
    Ok((total / count as f64, correct as f64 / count as f64))
}

struct NetworkRunner<'a, T: ?Sized, V: ?Sized> {
    net: Network,
    adam: AdamState,
    train: &'a T,
    val: &'a V,
    cfg: &'a TrainConfig,
    best: Option<Network>,
}

impl<T: BatchSource + ?Sized, V: BatchSource + ?Sized> EpochRunner for NetworkRunner<'_, T, V> {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64, TrainError> {
        let batches = self.train.epoch_batches(epoch as u64)?;
        train_epoch(&mut self.net, &batches, &mut self.adam, lr, self.cfg)
    }

    fn validate(&mut self, epoch: usize) -> Result<(f64, f64), TrainError> {
        evaluate_loss(&self.net, &self.val.epoch_batches(epoch as u64)?)
    }

    fn snapshot_best(&mut self, _epoch: usize) -> Result<(), TrainError> {
        self.best = Some(self.net.clone());
        Ok(())
    }

    fn restore_best(&mut self) -> Result<(), TrainError> {
        if let Some(best) = self.best.take() {
            self.net = best;
        }
        Ok(())
    }
}

/// Trains `net` under the full protocol and returns the best-validation
/// weights with the log. Each epoch record is written to `log` as a JSON
/// line and flushed immediately.
pub fn fit<T, V>(
    net: Network,
    train: &T,
    val: &V,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Network, TrainLog), TrainError>
where
    T: BatchSource + ?Sized,
    V: BatchSource + ?Sized,
{
    let adam = AdamState::new(net.params());
    let mut runner = NetworkRunner { net, adam, train, val, cfg, best: None };
    let record_io = |e: std::io::Error| TrainError::Io { path: "trainlog".into(), detail: e.to_string() };
    let trainlog = run_protocol(&mut runner, cfg, |rec| {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(rec).expect("record serializes")).map_err(record_io)?;
            w.flush().map_err(record_io)?;
        }
        Ok(())
    })?;
    Ok((runner.net, trainlog))
}
