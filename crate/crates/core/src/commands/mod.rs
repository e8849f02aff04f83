//! End-to-end commands: synthesize a dataset, train, evaluate, explain.
//!
//! Every command takes a [`RunConfig`] and writes its artifacts into one
//! output directory together with `config.json`, an echo of the resolved
//! configuration that is sufficient to rerun the command.

mod run;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use self::run::{
    cmd_evaluate, cmd_explain, cmd_train, gradcam_localization, read_score_file, write_score_file, EvalSource,
    EvaluateOutcome, ExplainMethod, ExplainOutcome, GradcamSummary, LocalizationReport, TrainOutcome, CHECKPOINT_FILE,
    TRAINLOG_FILE,
};
pub use self::synth::{
    cmd_synthesize, BlobRecord, GroundTruth, Quadrant, SplitCounts, SyntheticSpec, GROUND_TRUTH_FILE,
};
use crate::data::{derive_seed, DataError, PreprocessConfig};
use crate::gradcam::GradcamError;
use crate::lime::{LimeConfig, LimeError};
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::train::{TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Gradcam(#[from] GradcamError),
    #[error(transparent)]
    Lime(#[from] LimeError),
    #[error("score file {path}: {detail}")]
    ScoreFile { path: PathBuf, detail: String },
}

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> CommandError {
    CommandError::Io { path: path.to_path_buf(), detail: e.to_string() }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CommandError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Version of the artifact and config-echo layouts.
pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_ECHO_FILE: &str = "config.json";

/// Settings shared by all commands. Sub-configuration seeds are not read
/// from the file: [`RunConfig::resolved`] derives them from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// One of [`crate::model::PRESETS`].
    pub preset: String,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub lime: LimeConfig,
    pub synthetic: SyntheticSpec,
    /// Decision threshold for evaluation (score >= threshold is positive).
    pub threshold: f64,
    pub eval_split: String,
    pub checkpoint: Option<PathBuf>,
    /// Labelled score file evaluated instead of a checkpoint.
    pub scores: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub explain_method: String,
    /// Grad-CAM layer; the network's configured layer when absent.
    pub gradcam_layer: Option<String>,
    pub overlay_alpha: f32,
    /// Also write the normalized heatmap as CSV.
    pub heatmap_csv: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_root: None,
            out_dir: None,
            preset: "mini-dense".into(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            lime: LimeConfig::default(),
            synthetic: SyntheticSpec::default(),
            threshold: 0.5,
            eval_split: "test".into(),
            checkpoint: None,
            scores: None,
            image: None,
            explain_method: "both".into(),
            gradcam_layer: None,
            overlay_alpha: 0.4,
            heatmap_csv: false,
        }
    }
}

/// Tags mixed into the top-level seed for each consumer.
const SEED_TAGS: [(&str, u64); 4] = [("train", 1), ("preprocess", 2), ("lime", 3), ("synthetic", 4)];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CommandError> {
        serde_json::from_str(text).map_err(|e| CommandError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. The value is read as JSON when
    /// it parses, otherwise as a string. Every key must already exist.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self, CommandError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CommandError::Config(format!("override '{item}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| CommandError::Config(format!("unknown config key '{key}'")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| CommandError::Config(e.to_string()))
    }

    /// Copy with every sub-seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let derive = |tag: &str| {
            let t = SEED_TAGS.iter().find(|(n, _)| *n == tag).expect("known tag").1;
            derive_seed(self.seed, &[t])
        };
        c.train.seed = derive("train");
        c.preprocess.seed = derive("preprocess");
        c.lime.seed = derive("lime");
        c.synthetic.seed = derive("synthetic");
        c
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        self.train.validate()?;
        self.preprocess.validate()?;
        self.lime.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CommandError::Config(format!("threshold {} is outside [0, 1]", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(CommandError::Config(format!("overlay_alpha {} is outside [0, 1]", self.overlay_alpha)));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, CommandError> {
        self.out_dir.as_deref().ok_or_else(|| CommandError::Config("out_dir is not set".into()))
    }
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    format_version: u32,
    command: &'a str,
    seed: u64,
    package_version: &'a str,
    config: &'a RunConfig,
}

/// Creates `dir` and writes the config echo into it.
pub fn write_config_echo(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CommandError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let echo = ConfigEcho {
        format_version: FORMAT_VERSION,
        command,
        seed: cfg.seed,
        package_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    write_json(&dir.join(CONFIG_ECHO_FILE), &echo)
}

/// Reads the `config` member back out of a config echo.
pub fn read_config_echo(path: &Path) -> Result<RunConfig, CommandError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CommandError::Config(e.to_string()))?;
    let cfg = doc.get("config").cloned().ok_or_else(|| CommandError::Config("echo has no config".into()))?;
    serde_json::from_value(cfg).map_err(|e| CommandError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::default()
            .with_overrides(&["train.learning_rate=0.001", "preset=mini-effnet", "lime.kernel_width=0.5", "seed=9"])
            .unwrap();
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.preset, "mini-effnet");
        assert_eq!(c.lime.kernel_width, Some(0.5));
        assert_eq!(c.seed, 9);
        let err = RunConfig::default().with_overrides(&["train.learnign_rate=1"]).unwrap_err();
        assert!(err.to_string().contains("train.learnign_rate"));
        assert!(RunConfig::default().with_overrides(&["train"]).is_err());
        assert!(RunConfig::default().with_overrides(&["threshold=\"high\""]).is_err());
    }

    #[test]
    fn seeds_follow_the_top_level_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() }.resolved();
        let b = RunConfig { seed: 2, ..RunConfig::default() }.resolved();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.train.seed, a.lime.seed);
        assert_eq!(a, a.resolved());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig::default().resolved();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert!(RunConfig::from_json("{\"sed\": 1}").is_err());
    }
}
