//! Run configuration: one JSON document with a section per component.
//!
//! Domain A is the labeled source domain and domain B the unlabeled target.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::nets::ModelConfig;
use crate::objectives::ObjectiveWeights;
use crate::synth::DatasetSpec;
use crate::trainer::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "TTL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub objective: ObjectiveWeights,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// CPU-sized run: 32×32 images, small networks, capped epochs.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            train: TrainConfig {
                epochs: 20,
                iters_per_epoch: Some(30),
                batch_size: 16,
                lr: 1e-3,
                lr_late: 5e-4,
                lr_decay_epoch: 12,
                model: ModelConfig {
                    gen_channels: 8,
                    res_blocks: 2,
                    disc_channels: 8,
                    feature_dim: 16,
                    embed_dim: 32,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
            contrastive: ContrastiveConfig {
                n_patches: 32,
                ..ContrastiveConfig::default()
            },
            objective: ObjectiveWeights::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Full-size settings: 68×68 chips, batch 160, 50 epochs.
    pub fn paper() -> Self {
        Self {
            dataset: DatasetSpec {
                image_size: 68,
                ..DatasetSpec::default()
            },
            train: TrainConfig {
                epochs: 50,
                batch_size: 160,
                lr_decay_epoch: 30,
                model: ModelConfig {
                    gen_channels: 64,
                    res_blocks: 9,
                    disc_channels: 64,
                    feature_dim: 512,
                    embed_dim: 256,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
            contrastive: ContrastiveConfig {
                n_patches: 256,
                ..ContrastiveConfig::default()
            },
            objective: ObjectiveWeights::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Overlays a JSON document on a preset. Keys absent from the document
    /// keep the preset's value; unknown keys are rejected.
    pub fn from_json_over(base: &Self, doc: &str, origin: &Path) -> Result<Self> {
        let overlay: Value = serde_json::from_str(doc).map_err(|e| Error::json(origin, e))?;
        if !overlay.is_object() {
            return Err(Error::Config(format!("{}: config must be a JSON object", origin.display())));
        }
        let mut merged = serde_json::to_value(base).map_err(|e| Error::json(origin, e))?;
        merge(&mut merged, overlay);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::json(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_over(&Self::preset(preset), &doc, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.contrastive.validate()?;
        self.objective.validate()?;
        if self.train.batch_size > self.dataset.split_counts().0 * self.dataset.n_classes {
            return Err(Error::Config("batch_size exceeds the training split".into()));
        }
        Ok(())
    }

    /// `output_dir`, unless the output-root environment variable is set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
