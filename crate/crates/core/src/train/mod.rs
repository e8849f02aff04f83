//! Adam, binary cross-entropy training, plateau scheduling, early stopping
//! and best-epoch restoration.

mod adam;
mod protocol;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use self::adam::{adam_step, AdamState};
pub use self::protocol::{
    evaluate_loss, fit, reduce_lr_on_plateau, run_protocol, train_epoch, BatchSource, EpochRecord, EpochRunner,
    Improvement, StopReason, TrainLog, IMPROVEMENT_TOLERANCE,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in parameter {param}; step aborted")]
    NonFiniteGradient { param: String },
    #[error("gradient/parameter mismatch for {param}: {detail}")]
    GradientShape { param: String, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no batches to {0}")]
    EmptyBatches(&'static str),
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight each class by `N / (2 * N_class)` in the training loss.
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            early_stop_patience: 3,
            plateau_factor: 0.5,
            plateau_patience: 1,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            class_weighting: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.min_lr >= 0.0) {
            return bad("min_lr must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}
