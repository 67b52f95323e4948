//! Experiment files: a dataset source, the training config, ablation
//! switches, an output directory and the seeds to sweep.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use colt_core::detector::BackboneKind;
use colt_core::{StreamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment override for `train.deterministic` (`1`/`0`, `true`/`false`).
pub const DETERMINISTIC_ENV: &str = "COLT_DETERMINISTIC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Either a generated stream or a dataset directory written by `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub stream: Option<StreamConfig>,
}

/// Switches over the ablation axes. Unset fields keep the `[train]` value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub kd: Option<bool>,
    pub expansion: Option<bool>,
    pub backbone: Option<BackboneKind>,
    pub freeze_norm: Option<bool>,
    pub freeze_backbone: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.dataset.path, &self.dataset.stream) {
            (Some(_), Some(_)) => bail!("[dataset] takes either `path` or `stream`, not both"),
            (None, None) => bail!("[dataset] needs `path` or a `stream` table"),
            _ => {}
        }
        if self.seeds.is_empty() {
            bail!("`seeds` must list at least one seed");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("`seeds` contains duplicates");
        }
        for &seed in &self.seeds {
            self.train_config(seed).validate()?;
        }
        Ok(())
    }

    /// Training config of one seed: ablation switches applied, `seed` and the
    /// detector init seed set to `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        let a = &self.ablation;
        if let Some(v) = a.kd {
            t.kd.enabled = v;
        }
        if let Some(v) = a.expansion {
            t.expansion.enabled = v;
        }
        if let Some(v) = a.backbone {
            t.detector.backbone.kind = v;
        }
        if let Some(v) = a.freeze_norm {
            t.detector.backbone.freeze_norm = v;
        }
        if let Some(v) = a.freeze_backbone {
            t.detector.backbone.freeze_backbone = v;
        }
        t.seed = seed;
        t.detector.init_seed = seed;
        t
    }
}

/// Reads the deterministic-mode override from the environment.
pub fn deterministic_override() -> anyhow::Result<Option<bool>> {
    match std::env::var(DETERMINISTIC_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "on" | "yes" => Ok(Some(true)),
            "0" | "false" | "off" | "no" => Ok(Some(false)),
            "" => Ok(None),
            other => bail!("{DETERMINISTIC_ENV}={other} is not a boolean"),
        },
    }
}
