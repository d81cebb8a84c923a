//! Run configuration: one TOML file covering data, banks, model, losses, training
//! and evaluation. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::dataio::fixture::FixtureConfig;
use crate::dataio::Split;
use crate::discriminator::BankConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Filesystem layout. Relative paths are resolved against the config file's
/// directory by [`RunConfig::load`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root holding `train/`, `authentic/`, ... splits.
    pub data: PathBuf,
    /// Memory-bank directory written by `bank build`.
    pub banks: PathBuf,
    /// Training output: checkpoints and the step log.
    pub run: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            banks: "run/banks".into(),
            run: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// JPEG quality factors for the robustness sweep, in output order.
    pub qualities: Vec<u8>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            qualities: vec![90, 70, 50, 30, 10],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The only source of randomness: fixture, scribbles, initialization and
    /// batch order all derive from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub fixture: FixtureConfig,
    pub model: ModelConfig,
    pub bank: BankConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale settings: 128 px images, narrow backbone, short schedule.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.backbone = BackboneConfig {
            widths: [16, 32, 64, 128],
            ..Default::default()
        };
        cfg.train.image_size = 128;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 30;
        cfg.train.lr_init = 1e-3;
        cfg.eval.split = Split::Train;
        cfg.eval.qualities = vec![90, 50, 10];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bank.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        if !(self.fixture.coverage > 0.0 && self.fixture.coverage <= 1.0) {
            return Err(Error::Config(format!(
                "fixture.coverage must lie in (0, 1], got {}",
                self.fixture.coverage
            )));
        }
        if let Some(q) = self.eval.qualities.iter().find(|&&q| q == 0 || q > 100) {
            return Err(Error::Config(format!("JPEG quality {q} outside 1..=100")));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read, validate, and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data, &mut cfg.paths.banks, &mut cfg.paths.run] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn fixture_config(&self) -> FixtureConfig {
        FixtureConfig {
            seed: self.seed,
            ..self.fixture.clone()
        }
    }

    /// Hash of everything that shapes a training run; checkpoints carry it.
    pub fn training_hash(&self) -> String {
        checkpoint::config_hash(&(&self.model, &self.bank, &self.losses, &self.train, self.seed))
    }
}
