//! Run configuration file. Every field has a default, so an empty file (or
//! no file) describes the reference protocol.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chromoseg::data::Layout;
use chromoseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    #[default]
    Canonical,
    Published,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub layout: LayoutKind,
    /// Internal array name for the published layout.
    pub array: Option<String>,
    /// Split manifest written by `prepare`; when absent the split is drawn
    /// from `split_ratio` and `split_seed`.
    pub split: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            layout: LayoutKind::Canonical,
            array: None,
            split: None,
            split_ratio: 0.8,
            split_seed: 123,
            out: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn layout(&self) -> Layout {
        match self.layout {
            LayoutKind::Canonical => Layout::Canonical,
            LayoutKind::Published => Layout::Published {
                array: self.array.clone(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(dataset) = &self.dataset else {
            bail!("no dataset given; pass --dataset or set `dataset` in the config file");
        };
        if !dataset.exists() {
            bail!("dataset {} does not exist", dataset.display());
        }
        if let Some(split) = &self.split {
            if !split.exists() {
                bail!("split manifest {} does not exist", split.display());
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromoseg::losses::LossKind;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.split_seed, 123);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.loss.kind, LossKind::Lovasz);
        assert_eq!(cfg.train.loss.lambda, 10.0);
        assert!(cfg.train.gan_enabled);
    }

    #[test]
    fn nested_overrides_parse() {
        let text = r#"
            split_seed = 7
            layout = "published"
            array = "data/pairs"

            [train]
            batch_size = 4
            gan_enabled = false

            [train.loss]
            kind = "weighted_dice"

            [train.generator]
            filters = [2, 4, 8]
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.split_seed, 7);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.loss.kind, LossKind::WeightedDice);
        assert_eq!(cfg.train.loss.lambda, 10.0);
        assert_eq!(cfg.train.generator.filters, vec![2, 4, 8]);
        assert_eq!(
            cfg.layout(),
            Layout::Published {
                array: Some("data/pairs".into())
            }
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig {
            dataset: Some("corpus.h5".into()),
            ..RunConfig::default()
        };
        cfg.train.generator.filters = vec![3, 6, 12];
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("split_sed = 1").is_err());
    }

    #[test]
    fn missing_dataset_fails_validation() {
        assert!(RunConfig::default().validate().is_err());
        let cfg = RunConfig {
            dataset: Some("/nonexistent/x.h5".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
