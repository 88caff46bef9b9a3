//! Run configuration file: model, data and training sections plus the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bicnet::ModelConfig;
use crate::error::{Error, Result};
use crate::synthdata::GeneratorConfig;
use crate::traineval::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory containing `index.json`.
    pub root: PathBuf,
    /// Parameters used by `gen-data` when the directory is generated.
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synthetic"),
            generator: GeneratorConfig::default(),
        }
    }
}

impl DataConfig {
    /// Full-resolution frames and enough identities for `p = 16` batches.
    pub fn full() -> Self {
        Self {
            root: PathBuf::from("data/synthetic_full"),
            generator: GeneratorConfig {
                num_ids: 64,
                frame_size: [256, 128],
                ..GeneratorConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// `mini` pairs the desk-scale model with mini training settings,
    /// `resnet50` the full-scale model with full training settings.
    pub fn preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)?;
        let (data, train) = if name == "resnet50" {
            (DataConfig::full(), TrainConfig::full())
        } else {
            (DataConfig::default(), TrainConfig::mini())
        };
        Ok(Self {
            model,
            data,
            train,
            seed: 0,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        let span = (self.model.segment_len - 1) * self.train.sample_stride + 1;
        if self.data.generator.tracklet_len < span {
            return Err(Error::config(format!(
                "tracklets of {} frames cannot hold a {}-frame segment at stride {}",
                self.data.generator.tracklet_len, self.model.segment_len, self.train.sample_stride
            )));
        }
        let train_ids = self.data.generator.num_ids / 2;
        if train_ids < self.train.p {
            return Err(Error::config(format!(
                "{train_ids} training identities cannot fill batches of p = {}",
                self.train.p
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["mini", "resnet50"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(matches!(RunConfig::preset("vgg"), Err(Error::Config(_))));
    }

    #[test]
    fn cross_section_checks() {
        let mut cfg = RunConfig::preset("mini").unwrap();
        cfg.train.sample_stride = 10;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::preset("mini").unwrap();
        cfg.model.alpha = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::preset("mini").unwrap();
        cfg.train.p = 11;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sections_default_when_missing() {
        let model = serde_json::to_string(&ModelConfig::mini()).unwrap();
        let cfg: RunConfig = serde_json::from_str(&format!("{{\"model\": {model}}}")).unwrap();
        assert_eq!(cfg.train, TrainConfig::mini());
        assert_eq!(cfg.seed, 0);
    }
}
