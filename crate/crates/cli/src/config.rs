//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [model]            # any ModelConfig field; omitted fields take the toy defaults
//! n_layers = 4
//! placement = 3      # 0 disables the combining module
//!
//! [data]
//! source = "synthetic"
//! kind = "keyword-flag"
//! train_size = 2000
//! test_size = 500
//! seq_len = 48
//!
//! # or
//! # source = "files"
//! # train = "train.csv"
//! # test = "test.csv"        # optional if rows carry split = test
//! # format = "csv"           # optional, guessed from the extension
//! # label_map = "labels.json"
//!
//! [train]
//! epochs = 3
//! batch_size = 16
//! learning_rate = 2e-5
//! warmup_fraction = 0.1
//! val_fraction = 0.2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use token_thinner::model::AdamConfig;
use token_thinner::ModelConfig;

use crate::dataset::Format;
use crate::error::{CliError, Result};
use crate::synth::TaskKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        kind: TaskKind,
        train_size: usize,
        test_size: usize,
        seq_len: usize,
    },
    Files {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<Format>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_map: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            kind: TaskKind::KeywordFlag,
            train_size: 2000,
            test_size: 500,
            seq_len: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of all optimisation steps spent warming up.
    pub warmup_fraction: f64,
    /// Share of the training split held out for model selection when the
    /// data has no validation split of its own.
    pub val_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_fraction: 0.1,
            val_fraction: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let (DataConfig::Files { train, test, label_map, .. }, Some(dir)) = (&mut config.data, path.parent()) {
            for p in [Some(train), test.as_mut(), label_map.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be at least 1".into()));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(CliError::Config(format!("train.learning_rate {} is invalid", t.learning_rate)));
        }
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            return Err(CliError::Config(format!("train.warmup_fraction {} outside [0, 1]", t.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(CliError::Config(format!("train.val_fraction {} outside [0, 1)", t.val_fraction)));
        }
        if let DataConfig::Synthetic { train_size, test_size, .. } = self.data {
            if train_size == 0 || test_size == 0 {
                return Err(CliError::Config("synthetic train_size and test_size must be positive".into()));
            }
        }
        Ok(())
    }
}
