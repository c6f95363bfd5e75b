//! One serializable bundle of every stage's configuration.
//!
//! A run is fully described by the event extraction settings, the neuron
//! constants, the network architecture, and the objective. The bundle
//! round-trips through JSON byte for byte, rejects unknown keys, and fills
//! missing sections from defaults so a partial file stays valid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::events::EventConfig;
use crate::gatenet::GateNetConfig;
use crate::snn::SnnConfig;
use crate::train::TrainConfig;

/// Everything a training or evaluation run needs, in one file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub event: EventConfig,
    pub snn: SnnConfig,
    pub gatenet: GateNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.event.validate()?;
        self.gatenet.validate()?;
        self.train.validate()?;
        if self.event.grid != self.gatenet.grid {
            return Err(SgError::config(format!(
                "event grid {} does not match network grid {}",
                self.event.grid, self.gatenet.grid
            )));
        }
        if self.snn.tau_min >= self.snn.tau_max || self.snn.vth_min >= self.snn.vth_max {
            return Err(SgError::config("neuron clamp ranges must be non-empty"));
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; stable for byte comparison.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SgError::data(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Embeddable form for checkpoint headers.
    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value.clone())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_defaults_pin_the_working_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.event.c_th, 0.10);
        assert_eq!(cfg.event.beta, 0.025);
        assert_eq!(cfg.train.lambda_aux, 0.2);
        assert_eq!(cfg.train.lambda_supcon, 0.3);
        assert_eq!(cfg.train.tau_con, 0.07);
        assert_eq!(cfg.train.clip_norm, 1.0);
        assert_eq!(cfg.train.target_rate, 0.15);
        assert_eq!(cfg.train.lambda_rate, 0.01);
        assert_eq!(cfg.snn.tau_min, 0.5);
        assert_eq!(cfg.snn.tau_max, 20.0);
        assert_eq!(cfg.snn.vth_min, 0.05);
        assert_eq!(cfg.snn.vth_max, 10.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn test_json_roundtrip_is_exact() {
        let cfg = RunConfig::default();
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(text, back.to_json().unwrap());
        // the serialized constants survive a second trip unchanged
        assert_eq!(back.event.c_th, cfg.event.c_th);
        assert_eq!(back.train.tau_con, cfg.train.tau_con);
        // and the raw text spells out the pinned values
        assert!(text.contains("\"c_th\": 0.1"));
        assert!(text.contains("\"beta\": 0.025"));
        assert!(text.contains("\"tau_con\": 0.07"));
        assert!(text.contains("\"target_rate\": 0.15"));
    }

    #[test]
    fn test_partial_file_fills_from_defaults() {
        let cfg = RunConfig::from_json("{\"train\": {\"epochs\": 3}}").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lambda_aux, 0.2);
        assert_eq!(cfg.event.grid, 14);
        assert_eq!(cfg.gatenet.d, 32);
    }

    #[test]
    fn test_unknown_and_inconsistent_keys_rejected() {
        assert!(RunConfig::from_json("{\"optimizer\": \"sgd\"}").is_err());
        assert!(RunConfig::from_json("{\"train\": {\"momentum\": 0.9}}").is_err());
        let skewed = "{\"event\": {\"grid\": 10}}";
        assert!(RunConfig::from_json(skewed).is_err());
    }

    #[test]
    fn test_file_and_value_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = RunConfig::default();
        cfg.train.seed = 99;
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.train.seed, 99);
        let value = cfg.to_value().unwrap();
        let back = RunConfig::from_value(&value).unwrap();
        assert_eq!(back.train.seed, 99);
    }
}
