use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lungscope::commands::{
    cmd_evaluate, cmd_explain, cmd_synthesize, cmd_train, write_config_echo, RunConfig, GROUND_TRUTH_FILE,
};
use lungscope::train::StopReason;

/// Pneumonia classification on chest X-rays, with Grad-CAM and LIME
/// explanations.
#[derive(Parser)]
#[command(name = "lungscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a planted positive-class signal.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network on {dataset}/train, validating on {dataset}/val.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Network preset (mini-dense or mini-effnet).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compute metrics for a checkpoint on a split, or for a score file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// CSV with `label` and `score` columns, evaluated instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Explain the positive-class score of one image.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// gradcam, lime or both.
        #[arg(long)]
        method: Option<String>,
        /// Grad-CAM target layer.
        #[arg(long)]
        layer: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("could not size the thread pool")?;
        }
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut sets = extra;
        if let Some(seed) = self.seed {
            sets.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            sets.push(format!("out_dir={}", json_str(&out.to_string_lossy())));
        }
        sets.extend(self.overrides.iter().cloned());
        Ok(base.with_overrides(&sets)?)
    }
}

/// Quotes a string as a JSON value so overrides never reinterpret it.
fn json_str(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

fn set<T: ToString>(sets: &mut Vec<String>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        sets.push(format!("{key}={}", v.to_string()));
    }
}

fn set_str(sets: &mut Vec<String>, key: &str, value: Option<&str>) {
    if let Some(v) = value {
        sets.push(format!("{key}={}", json_str(v)));
    }
}

fn set_path(sets: &mut Vec<String>, key: &str, value: &Option<PathBuf>) {
    set_str(sets, key, value.as_ref().map(|p| p.to_string_lossy()).as_deref());
}

fn stop_label(r: StopReason) -> &'static str {
    match r {
        StopReason::MaxEpochs => "epoch limit reached",
        StopReason::EarlyStop => "early stopping",
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize { common } => {
            let cfg = common.load(Vec::new())?.resolved();
            let out = cfg.out_dir()?.to_path_buf();
            let truth = cmd_synthesize(&cfg.synthetic, &out)?;
            write_config_echo(&out, "synthesize", &cfg)?;
            let c = cfg.synthetic.counts;
            println!(
                "wrote {} images ({} train, {} val, {} test) to {}",
                c.train + c.val + c.test,
                c.train,
                c.val,
                c.test,
                out.display()
            );
            println!("{} planted blobs listed in {}", truth.blobs.len(), out.join(GROUND_TRUTH_FILE).display());
        }
        Command::Train { common, dataset, preset, epochs } => {
            let mut sets = Vec::new();
            set_path(&mut sets, "dataset_root", &dataset);
            set_str(&mut sets, "preset", preset.as_deref());
            set(&mut sets, "train.max_epochs", &epochs);
            let cfg = common.load(sets)?;
            let outcome = cmd_train(&cfg)?;
            for e in &outcome.log.epochs {
                println!(
                    "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.2e}",
                    e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.learning_rate
                );
            }
            println!(
                "best epoch {} (val_loss {:.4}, val_acc {:.4}); stopped: {}",
                outcome.log.best_epoch,
                outcome.log.best_val_loss,
                outcome.best_val_accuracy,
                stop_label(outcome.log.stop_reason)
            );
            println!("checkpoint: {} ({} parameters)", outcome.checkpoint.display(), outcome.param_count);
        }
        Command::Evaluate { common, checkpoint, dataset, split, scores, threshold } => {
            let mut sets = Vec::new();
            set_path(&mut sets, "checkpoint", &checkpoint);
            set_path(&mut sets, "dataset_root", &dataset);
            set_str(&mut sets, "eval_split", split.as_deref());
            set_path(&mut sets, "scores", &scores);
            set(&mut sets, "threshold", &threshold);
            let cfg = common.load(sets)?;
            let outcome = cmd_evaluate(&cfg).with_context(|| match (&cfg.scores, &cfg.checkpoint) {
                (Some(s), _) => format!("evaluating scores {}", s.display()),
                (None, Some(c)) => format!("evaluating checkpoint {}", c.display()),
                _ => "evaluating".to_string(),
            })?;
            println!("{}", outcome.table);
        }
        Command::Explain { common, checkpoint, image, method, layer } => {
            let mut sets = Vec::new();
            set_path(&mut sets, "checkpoint", &checkpoint);
            set_path(&mut sets, "image", &image);
            set_str(&mut sets, "explain_method", method.as_deref());
            set_str(&mut sets, "gradcam_layer", layer.as_deref());
            let cfg = common.load(sets)?;
            let outcome = cmd_explain(&cfg).with_context(|| match &cfg.checkpoint {
                Some(c) => format!("explaining with checkpoint {}", c.display()),
                None => "explaining".to_string(),
            })?;
            println!("p(pneumonia) = {:.4}", outcome.probability);
            if let Some(hm) = &outcome.heatmap {
                let (r, c) = hm.argmax();
                println!("grad-cam layer {}: peak at row {r}, col {c}", hm.target_layer);
            }
            if let Some(l) = &outcome.lime {
                println!("lime local R^2 {:.4}; top segments:", l.local_r2);
                for (seg, w) in &l.top_k {
                    println!("  segment {seg:>3}  weight {w:+.4}");
                }
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
