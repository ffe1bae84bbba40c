use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, StoredParam};

use super::config::TrainConfig;
use super::model::Model;

/// Model parameters, optimizer state and the configuration that built them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Canonical `key = value` text of the training configuration.
    pub config: String,
    pub config_hash: String,
    /// Training epochs completed.
    pub epoch: usize,
    pub val_mpjpe: f64,
    pub params: Vec<StoredParam>,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, model: &Model, epoch: usize, val_mpjpe: f64, gen: &Adam, disc: &Adam) -> Self {
        Self {
            config: cfg.to_text(),
            config_hash: cfg.hash(),
            epoch,
            val_mpjpe,
            params: model.store.snapshot(),
            generator_opt: gen.clone(),
            discriminator_opt: disc.clone(),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig::parse(&self.config)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Data("checkpoint config hash does not match its config".into()));
        }
        Ok(cfg)
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn model(&self) -> Result<(TrainConfig, Model)> {
        let cfg = self.train_config()?;
        let mut model = Model::new(&cfg)?;
        model
            .store
            .restore(&self.params)
            .map_err(|e| Error::Data(format!("checkpoint parameters: {e}")))?;
        Ok((cfg, model))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Numerical(format!("cannot serialize checkpoint: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}
