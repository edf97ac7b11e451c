//! JSON training configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vdsnet_core::metrics::{check_threshold, DEFAULT_BETA, DEFAULT_THRESHOLD};
use vdsnet_core::zoo::ModelId;

use crate::metadata::HeaderMap;

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}
fn default_cache() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelId,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub csv: PathBuf,
    pub image_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Decoded images kept in memory.
    #[serde(default = "default_cache")]
    pub cache_images: usize,
    #[serde(default)]
    pub headers: HeaderMap,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if self.early_stop_patience == 0 {
            bail!("early_stop_patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!("learning_rate must be positive");
        }
        if !(self.beta > 0.0) {
            bail!("beta must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            bail!("val_fraction must lie in (0, 1)");
        }
        check_threshold(self.threshold)?;
        Ok(())
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: TrainConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.csv, &mut cfg.image_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
