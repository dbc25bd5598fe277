//! Experiment configuration: one JSON document wrapping the trainer config
//! plus data paths and sampler defaults. Command-line flags override fields.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cnc_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, cfg_scale: 7.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Triplet store consumed by training.
    #[serde(default)]
    pub triplets: Option<PathBuf>,
    /// Output directory for logs and checkpoints.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(
            std::str::from_utf8(&bytes).context("config is not valid utf-8")?,
        )
        .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(crate::manifest::sha256_hex(&serde_json::to_vec(self)?))
    }
}
