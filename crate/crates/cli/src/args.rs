//! Command-line flags. Every flag can also come from a JSON file passed with
//! `--config`, whose keys are the flag names in snake case; flags given on
//! the command line win.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::experiments::Method;

#[derive(Debug, Parser)]
#[command(
    name = "transem",
    version,
    about = "Simulate, reconstruct, train and evaluate unrolled TransEM models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a phantom dataset with low- and high-count scans.
    Simulate(SimulateArgs),
    /// Reconstruct one split of a dataset with a chosen method.
    Recon(ReconArgs),
    /// Train a TransEM (or CNN-regularized) model on a dataset.
    Train(TrainArgs),
    /// Aggregate reconstruction metrics across methods and count levels.
    Eval(EvalArgs),
    /// Block-count and outer-residual ablations on one dataset.
    Ablate(AblateArgs),
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output dataset directory (must not exist or be empty).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of phantoms [default: 20].
    #[arg(long)]
    pub phantoms: Option<usize>,
    /// Slices per phantom [default: 1].
    #[arg(long)]
    pub slices: Option<usize>,
    /// Train,val,test split as fractions or phantom counts [default: 0.85,0.05,0.10].
    #[arg(long)]
    pub split: Option<String>,
    /// Expected true counts of the low-count scan [default: 5e4].
    #[arg(long)]
    pub counts: Option<f64>,
    /// Expected true counts of the label scan [default: 5e5].
    #[arg(long)]
    pub high_counts: Option<f64>,
    /// Scanner geometry JSON file; overrides the size flags below.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    /// Image side in pixels [default: 64].
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Number of projection angles [default: 60].
    #[arg(long)]
    pub angles: Option<usize>,
    /// Detector bins per angle [default: 3 × image size / 2 − 1].
    #[arg(long)]
    pub bins: Option<usize>,
    /// Background (scatter + randoms) fraction of the measured counts [default: 0.2].
    #[arg(long)]
    pub background: Option<f64>,
    /// PSF FWHM of the low-count scan in mm [default: 4].
    #[arg(long)]
    pub psf_low: Option<f64>,
    /// PSF FWHM of the label scan in mm [default: 2.5].
    #[arg(long)]
    pub psf_high: Option<f64>,
    /// Master seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draw test phantoms from a differently parameterized family.
    #[arg(long)]
    pub holdout_style: bool,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconArgs {
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Split to reconstruct: train, val or test [default: test].
    #[arg(long)]
    pub split: Option<String>,
    /// EM iterations [default: 10].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Ordered subsets [default: 6, 1 for mlem].
    #[arg(long)]
    pub subsets: Option<usize>,
    /// Quadratic penalty weight for mapem [default: 0.005].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Trained model for transem and fbsem-cnn.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// transem or fbsem-cnn [default: transem].
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Passes over the training split [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Adam learning rate [default: 5e-5].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Samples per step [default: 4].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Seed for initialization and shuffling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Unrolled blocks; must be a multiple of the subset count [default: 60].
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Unrolled iterations [default: 10].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Ordered subsets per iteration [default: 6].
    #[arg(long)]
    pub subsets: Option<usize>,
    /// Regularizer feature channels [default: 32].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Attention window side [default: 4].
    #[arg(long)]
    pub window: Option<usize>,
    /// MLP hidden width as a multiple of the channels [default: 2].
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    /// Cyclically shift attention windows by half a window.
    #[arg(long)]
    pub shift_windows: bool,
    /// Learned relative position bias in attention.
    #[arg(long)]
    pub rel_bias: bool,
    /// Drop the regularizer's input-to-output residual connection.
    #[arg(long)]
    pub no_outer_residual: bool,
    /// One regularizer per block instead of one shared by all blocks.
    #[arg(long)]
    pub unshared: bool,
    /// Validate every this many steps; 0 validates once per epoch [default: 0].
    #[arg(long)]
    pub validate_every: Option<usize>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directories the reconstructions were made from (repeatable).
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Reconstruction directories written by `recon` (repeatable).
    #[arg(long)]
    pub recon: Vec<PathBuf>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateArgs {
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer steps per variant [default: 200].
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Adam learning rate [default: 2e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Samples per step [default: 4].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Regularizer feature channels [default: 16].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Validate every this many steps [default: 20].
    #[arg(long)]
    pub validate_every: Option<usize>,
    /// Seed for initialization and shuffling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Overlays the flags given on the command line onto the `--config` file.
/// Unset options, `false` switches and empty lists do not override.
pub fn merge_with_file<T: Serialize + DeserializeOwned>(
    cli: &T,
    config: Option<&Path>,
) -> CliResult<T> {
    let mut merged = match config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            match serde_json::from_slice::<serde_json::Value>(&bytes) {
                Ok(serde_json::Value::Object(map)) => map,
                Ok(_) => {
                    return Err(CliError::config(format!(
                        "{}: expected a JSON object",
                        path.display()
                    )))
                }
                Err(e) => return Err(CliError::config(format!("{}: {e}", path.display()))),
            }
        }
        None => serde_json::Map::new(),
    };
    let given = serde_json::to_value(cli).map_err(|e| CliError::config(e.to_string()))?;
    if let serde_json::Value::Object(flags) = given {
        for (key, value) in flags {
            let unset = match &value {
                serde_json::Value::Null | serde_json::Value::Bool(false) => true,
                serde_json::Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !unset {
                merged.insert(key, value);
            }
        }
    }
    serde_json::from_value(serde_json::Value::Object(merged))
        .map_err(|e| CliError::config(format!("config file: {e}")))
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> CliResult<T> {
    value
        .clone()
        .ok_or_else(|| CliError::config(format!("missing required flag --{flag}")))
}
