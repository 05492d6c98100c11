//! Declarative run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgjnd::ingest::Layout;
use sgjnd::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output root; relative paths resolve against the config file.
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_synthetic_seed")]
        seed: u64,
        #[serde(default = "default_synthetic_count")]
        count: usize,
        #[serde(default = "default_synthetic_size")]
        size: usize,
    },
    Dataset {
        layout: Layout,
        root: PathBuf,
    },
}

fn default_synthetic_seed() -> u64 {
    7
}

fn default_synthetic_count() -> usize {
    16
}

fn default_synthetic_size() -> usize {
    64
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            seed: default_synthetic_seed(),
            count: default_synthetic_count(),
            size: default_synthetic_size(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; every failure here is a usage error.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.run_dir = base.join(&cfg.run_dir);
        if let DataConfig::Dataset { root, .. } = &mut cfg.data {
            *root = base.join(&*root);
        }
        if let Some(w) = &mut cfg.train.backbone.weights_path {
            *w = base.join(&*w);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if let DataConfig::Synthetic { count, size, .. } = self.data {
            if count == 0 || size < sgjnd::ingest::MIN_SYNTHETIC_SIZE {
                return Err(CliError::Usage(format!(
                    "config: synthetic data needs count >= 1 and size >= {}",
                    sgjnd::ingest::MIN_SYNTHETIC_SIZE
                )));
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.run_dir.join("data")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.run_dir.join(format!("fold{fold}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_takes_every_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.n_patches, 16);
        assert_eq!(cfg.train.patch_size, 64);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 1}}"#).is_err());
    }

    #[test]
    fn dataset_source_parses_layout() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"data": {"source": "dataset", "layout": "KONJND_1K", "root": "k"}}"#)
                .unwrap();
        assert_eq!(
            cfg.data,
            DataConfig::Dataset {
                layout: Layout::Konjnd1k,
                root: PathBuf::from("k")
            }
        );
    }
}
