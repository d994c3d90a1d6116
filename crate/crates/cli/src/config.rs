//! Experiment configuration: one JSON document that, together with a seed,
//! pins down an entire run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hdrfusion::io::dataset::CaptureParams;
use hdrfusion::model::{EafnetConfig, TrainConfig};
use hdrfusion::scene::Scene;

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a scene description JSON. When absent, a built-in dynamic
    /// scene is generated from the run seed.
    pub scene: Option<PathBuf>,
    pub capture: CaptureParams,
    pub model: EafnetConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.capture.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// The scene this experiment captures: loaded from `scene` when set,
    /// otherwise generated deterministically from the seed.
    pub fn resolve_scene(&self, seed: u64) -> Result<Scene, CliError> {
        match &self.scene {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read scene {}: {e}", path.display()))
                })?;
                let scene: Scene = serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(format!("invalid scene {}: {e}", path.display()))
                })?;
                scene.validate().map_err(|e| CliError::Config(e.to_string()))?;
                Ok(scene)
            }
            None => Ok(Scene::default_dynamic(seed)),
        }
    }

    /// Snapshot embedded into run manifests.
    pub fn to_value(&self) -> Result<serde_json::Value, CliError> {
        Ok(serde_json::to_value(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.capture.reference_rate_hz, back.capture.reference_rate_hz);
        assert_eq!(cfg.model.base_channels, back.model.base_channels);
        assert_eq!(cfg.train.epochs, back.train.epochs);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>("{\"typo\": 1}").unwrap_err();
        assert!(err.to_string().contains("typo"));
    }
}
