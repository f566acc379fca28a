//! Run configuration: one TOML file drives the whole pipeline. Unknown
//! keys are rejected; command-line flags override file values and the
//! effective config is echoed into the output directory for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::lime::ExplainConfig;
use crate::train::TrainingConfig;
use crate::zoo::{Family, FreezePolicy, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone families to train, in ensemble branch order.
    pub families: Vec<Family>,
    pub variant: Variant,
    pub freeze_policy: FreezePolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            families: Family::ALL.to_vec(),
            variant: Variant::TinyRandom,
            freeze_policy: FreezePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub dense_widths: Vec<usize>,
    pub branch_trainable: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            dense_widths: crate::ensemble::DEFAULT_DENSE_WIDTHS.to_vec(),
            branch_trainable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Local directory of pretrained weights; only needed for
    /// `full_pretrained` variants.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_store: Option<PathBuf>,
    pub split: SplitConfig,
    pub augmentation: AugmentationConfig,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub ensemble: EnsembleConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            seed: 42,
            weight_store: None,
            split: SplitConfig::default(),
            augmentation: AugmentationConfig::default(),
            training: TrainingConfig::default(),
            model: ModelConfig::default(),
            ensemble: EnsembleConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        self.training.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.train_fraction must lie in (0,1), got {}",
                self.split.train_fraction
            )));
        }
        if self.model.families.is_empty() {
            return Err(Error::Config("model.families must not be empty".into()));
        }
        if self.explain.n_samples < 4 {
            return Err(Error::Config("explain.n_samples must be >= 4".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the effective configuration into the output directory.
    pub fn echo_into_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)
            .map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("effective-config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    /// A small preset for the synthetic fixture: 64x64 inputs, short
    /// schedule, larger learning rate. Used by the smoke workflow and
    /// the examples.
    pub fn fixture_preset(dataset_root: PathBuf, output_dir: PathBuf, seed: u64) -> Self {
        let mut config = RunConfig {
            dataset_root,
            output_dir,
            seed,
            ..Default::default()
        };
        config.augmentation.target_size = (64, 64);
        config.augmentation.rotation_range_deg = 0.0;
        config.augmentation.zoom_range = 0.0;
        config.augmentation.width_shift = 0.0;
        config.augmentation.height_shift = 0.0;
        config.training.epochs = 15;
        config.training.batch_size = 8;
        config.training.optimizer.learning_rate = 0.01;
        config.training.seed = seed;
        config.explain.n_segments = 16;
        config.explain.n_samples = 256;
        config.explain.seed = seed;
        config
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join("manifest.csv")
    }

    pub fn scan_errors_path(&self) -> PathBuf {
        self.output_dir.join("scan_errors.txt")
    }

    pub fn model_dir(&self, model: &str) -> PathBuf {
        self.output_dir.join(model)
    }

    pub fn checkpoint_path(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("checkpoints").join("best.ckpt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_config() {
        let config = RunConfig::fixture_preset("data/x".into(), "out/x".into(), 7);
        let text = config.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
dataset_root = "data"
definitely_not_a_key = 1
"#;
        let err = toml::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("definitely_not_a_key"));
    }

    #[test]
    fn nested_unknown_keys_are_rejected() {
        let text = r#"
[training]
epochs = 3
warmup_epochs = 1
"#;
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = r#"
dataset_root = "somewhere"
[training]
epochs = 3
"#;
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.training.epochs, 3);
        assert_eq!(config.training.batch_size, 32);
        assert_eq!(config.split.train_fraction, 0.8);
        assert_eq!(config.model.families.len(), 4);
    }

    #[test]
    fn validation_rejects_bad_fraction() {
        let mut config = RunConfig::default();
        config.split.train_fraction = 1.5;
        assert!(config.validate().is_err());
    }
}
