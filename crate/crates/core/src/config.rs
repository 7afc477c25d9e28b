//! JSON run configuration with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::losses::FscConfig;
use crate::model::ModelConfig;
use crate::ot::OtConfig;
use crate::synth::SceneConfig;
use crate::train::TrainConfig;
use crate::transformer::TransformerConfig;
use crate::unet::UNetConfig;
use crate::voxel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("override {0:?} is not of the form key.path=value")]
    OverrideSyntax(String),
    #[error("override key {0:?} does not name an existing setting")]
    UnknownKey(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelConfig {
    pub size: f64,
    pub k: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            size: voxel::DEFAULT_VOXEL_SIZE,
            k: voxel::DEFAULT_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scenes written by `gen`.
    pub scenes: usize,
    pub scene: SceneConfig,
    pub voxel: VoxelConfig,
    pub unet: UNetConfig,
    pub transformer: TransformerConfig,
    pub ot: OtConfig,
    pub fsc: FscConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenes: 64,
            scene: SceneConfig::default(),
            voxel: VoxelConfig::default(),
            unet: UNetConfig::default(),
            transformer: TransformerConfig::default(),
            ot: OtConfig::default(),
            fsc: FscConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Sets `path` (dotted) inside `root` to `raw`, parsed as JSON when possible
/// and as a string otherwise. The key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::OverrideSyntax(assignment.to_string()))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path` (or defaults), applies overrides, validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.scene.validate().map_err(|e| inv(&e))?;
        self.model().validate().map_err(|e| inv(&e))?;
        self.fsc.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            voxel_size: self.voxel.size,
            devox_k: self.voxel.k,
            unet: self.unet.clone(),
            transformer: self.transformer.clone(),
            ot: self.ot.clone(),
        }
    }

    /// Pretty JSON with fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_round_trip() {
        let cfg = RunConfig::load(None, &["ot.epsilon=0.01".into(), "train.epochs_stage2=0".into()]).unwrap();
        assert_eq!(cfg.ot.epsilon, 0.01);
        assert_eq!(cfg.train.epochs_stage2, 0);
        let back = RunConfig::from_json(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["ot.temperature=1".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(RunConfig::load(None, &["ot".into()]), Err(ConfigError::OverrideSyntax(_))));
        assert!(RunConfig::from_json(r#"{"ot": {"epsilon": 0.1, "rho": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["ot.epsilon=0".into()]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(RunConfig::load(None, &["ot.iters=\"many\"".into()]).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"scenes": 4, "fsc": {"lambda": 0.5}}"#).unwrap();
        assert_eq!(cfg.scenes, 4);
        assert_eq!(cfg.fsc.lambda, 0.5);
        assert_eq!(cfg.fsc.tau, 0.39);
    }
}
