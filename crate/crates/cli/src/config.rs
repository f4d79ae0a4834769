//! Run configuration files.
//!
//! ```toml
//! preset = "toy"        # base values for every section: "full", "toy" or "desk"
//!
//! [model]               # ModelConfig fields, overriding the preset
//! mask_clip = 5.0
//!
//! [train]               # TrainConfig fields
//! lr = 5e-4
//!
//! [loss]                # LossConfig fields
//! lambda2 = 0.0
//! ```

use std::path::Path;

use dctnet::model::ModelConfig;
use dctnet::train::{LossConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

const SECTIONS: [&str; 4] = ["preset", "model", "train", "loss"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match (ModelConfig::preset(name), TrainConfig::preset(name)) {
            (Some(model), Some(train)) => Ok(Self { model, train, loss: LossConfig::default() }),
            _ => Err(CliError::Config(format!("unknown preset {name:?} (expected \"full\", \"toy\" or \"desk\")"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("bad config: {e}")))?;
        if let Some(key) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
        let preset = match table.remove("preset") {
            None => "full".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(CliError::Config(format!("preset must be a string, got {v}"))),
        };
        let base = Self::preset(&preset)?;
        let cfg = Self {
            model: overlay(&base.model, table.remove("model"), "model")?,
            train: overlay(&base.train, table.remove("train"), "train")?,
            loss: overlay(&base.loss, table.remove("loss"), "loss")?,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.loss.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or takes `arg` as a preset name when no such
    /// file exists.
    pub fn load(arg: &str) -> Result<Self, CliError> {
        let path = Path::new(arg);
        if !path.exists() {
            if let Ok(cfg) = Self::preset(arg) {
                return Ok(cfg);
            }
        }
        let text = std::fs::read_to_string(path).map_err(dctnet::Error::from)?;
        Self::parse(&text)
    }
}

/// Replaces the fields of `base` named in `section`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, section: Option<toml::Value>, name: &str) -> Result<T, CliError> {
    let Some(section) = section else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let toml::Value::Table(section) = section else {
        return Err(CliError::Config(format!("[{name}] must be a table")));
    };
    let mut merged = serde_json::to_value(base)?;
    let fields = merged.as_object_mut().expect("config sections serialize as maps");
    for (k, v) in section {
        fields.insert(k, serde_json::to_value(v)?);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Config(format!("[{name}]: {e}")))
}
