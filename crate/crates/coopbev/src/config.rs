//! Experiment configuration: named scale presets, TOML layering, and the
//! config hash stamped on every report row.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::sim::payload::PayloadWidths;
use crate::train::step::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub rate_hz: f64,
    pub duration_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            rate_hz: 5.0,
            duration_s: 4.0,
        }
    }
}

/// Everything one experiment run needs besides the spec itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub payload: PayloadWidths,
    pub scenario: ScenarioConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(0),
            eval: EvalConfig::default(),
            payload: PayloadWidths::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced grid and channel widths for fast overfit runs; the model
    /// architecture and every pipeline stage stay identical to `default`.
    pub fn acceptance() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.model.query_grid_w = 12;
        cfg.model.query_grid_h = 8;
        cfg.model.embed_dim = 24;
        cfg.model.attn_head_dim = 8;
        cfg.model.anchor_z = vec![1.0];
        cfg.model.pillar_voxel = (0.5, 0.5, 4.5);
        cfg.model.fpn_channels = 8;
        cfg.model.pillar_mlp_width = 8;
        cfg.model.bev_stage_channels = vec![8, 12];
        cfg.model.image_stage_channels = vec![8, 10, 12];
        cfg.model.decoder.embed_dim = 24;
        cfg.model.decoder.num_object_queries = 16;
        cfg.model.decoder.num_layers = 2;
        cfg.train.epochs = 8;
        cfg.train.match_l1_weight = 2.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse(e.to_string()))
    }
}

/// Section-level overrides: a config file may replace any whole section and
/// inherit the defaults for the rest.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct ConfigOverlay {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalConfig>,
    pub payload: Option<PayloadWidths>,
    pub scenario: Option<ScenarioConfig>,
}

pub fn load_config(path: &Path, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let overlay: ConfigOverlay = toml::from_str(&text).map_err(|e| Error::parse(e.to_string()))?;
    let cfg = ExperimentConfig {
        model: overlay.model.unwrap_or(base.model),
        train: overlay.train.unwrap_or(base.train),
        eval: overlay.eval.unwrap_or(base.eval),
        payload: overlay.payload.unwrap_or(base.payload),
        scenario: overlay.scenario.unwrap_or(base.scenario),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Short hex digest over the canonical config snapshot plus the run spec
/// line; identical hashes mean exactly reproducible runs.
pub fn config_hash(cfg: &ExperimentConfig, spec_line: &str) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(cfg.to_toml()?.as_bytes());
    hasher.update(b"\n");
    hasher.update(spec_line.as_bytes());
    let digest = hasher.finalize();
    Ok(hex_prefix(&digest, 16))
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}
