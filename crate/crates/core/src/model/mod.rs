//! Dense-connectivity and MBConv block families, preset networks and
//! weight checkpoints.

mod checkpoint;
mod network;
mod spec;

use std::path::PathBuf;

use crate::tensor::TensorError;

pub use self::checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_for, network_from_bytes, save_checkpoint, CHECKPOINT_VERSION,
};
pub use self::network::{forward, ForwardOptions, Inference, Network, ParamVars, StatsMap, Trace};
pub use self::spec::{BlockShape, BlockSpec, HeadSpec, NetworkSpec, PRESETS};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown preset '{0}' (expected one of mini-dense, mini-effnet)")]
    UnknownPreset(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid block {block}: {detail}")]
    InvalidBlock { block: String, detail: String },
    #[error("shape chain broken at {boundary}: {detail}")]
    ShapeChain { boundary: String, detail: String },
    #[error("parameter {name}: {detail}")]
    ParamMismatch { name: String, detail: String },
    #[error("input shape {found:?} does not match the network input {expected:?}")]
    InputShape { found: Vec<usize>, expected: Vec<usize> },
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}
