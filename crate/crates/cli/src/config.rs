//! Effective per-command configurations.
//!
//! Precedence: command-line flags > `ADMM_MPNN_SEED` (for seeds, when no
//! flag is given) > config file (`--config`) > defaults. The effective
//! configuration is always written next to the command's outputs, and the
//! written file is itself a valid `--config` input, so any run can be
//! reproduced from its recorded config.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use dadmm_core::learned::ModelVariant;
use dadmm_core::problems::ProblemClass;

use crate::CliError;

pub const SEED_ENV: &str = "ADMM_MPNN_SEED";

pub fn load_config_file<C: DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing config {}: {e}", path.display())))
}

pub fn write_config_file<C: Serialize>(cfg: &C, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Config(format!("serializing config: {e}")))?;
    std::fs::write(path, json)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Seed precedence: flag > environment (when no flag) > config/default.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}='{text}' is not a valid seed"))),
        Err(_) => Ok(fallback),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub class: ProblemClass,
    pub out: PathBuf,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub nodes: usize,
    pub dim: usize,
    pub edge_prob: f64,
    pub baseline_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCliConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: ModelVariant,
    pub class: ProblemClass,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub loss_eps: f64,
    pub seed: u64,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub variants: Option<Vec<ModelVariant>>,
    pub ks: Vec<usize>,
    pub trace_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceConfig {
    pub data: PathBuf,
    pub split: String,
    pub instance: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub k_max: usize,
}
