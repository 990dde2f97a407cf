//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 0                 # parameter init and data order
//! preset = "smoke"         # base model: "desk" or "smoke"
//! variant = "nca_dsi"      # dynamic_only | cnn_only | nca_only | nca_dsi
//! pathway = "dual"         # dual | single_shared
//!
//! [model]                  # optional overrides of the preset
//! n_blocks = 3
//! block_channels = [16, 16, 16]
//! block_strides = [2, 1, 1]
//! block_depth = 1
//! vfe_channels = 16
//! static_vfe_channels = 8
//! classes = 3
//!
//! [attention]              # optional overrides
//! neighborhood = 7
//! heads = 8                # token widths follow each block's channels
//!
//! [grid]                   # optional; a named preset or a square grid
//! preset = "desk"          # desk | pointpillars-nuscenes | centerpoint-nuscenes
//! half = 6.4               # or: square [-half, half)² ...
//! pillar_size = 0.4        # ... with this pillar edge
//!
//! [train]
//! lr = 1e-3
//! momentum = 0.9
//! batch_size = 1
//! augment = false
//! ```
//!
//! Unknown keys are rejected; every error names the offending field path.

use std::path::Path;

use dynstaf::model::{FusionVariant, ModelConfig, Pathway, TrainOptions};
use dynstaf::nca::AttentionConfig;
use dynstaf::pillars::GridConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub preset: Option<String>,
    pub variant: Option<FusionVariant>,
    pub pathway: Option<Pathway>,
    #[serde(default)]
    pub model: ModelOverrides,
    pub attention: Option<AttentionOverrides>,
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub n_blocks: Option<usize>,
    pub block_channels: Option<Vec<usize>>,
    pub block_strides: Option<Vec<usize>>,
    pub block_depth: Option<usize>,
    pub vfe_channels: Option<usize>,
    pub static_vfe_channels: Option<usize>,
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionOverrides {
    pub neighborhood: Option<usize>,
    pub heads: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub preset: Option<String>,
    pub half: Option<f32>,
    pub pillar_size: Option<f32>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainOptions::default();
        Self {
            lr: d.lr,
            momentum: d.momentum,
            batch_size: d.batch_size,
            augment: d.augment,
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| config_error(format!("config syntax: {e}")))?;
        serde_path_to_error::deserialize(value)
            .map_err(|e| {
                // the inner message may repeat the path on a second line
                let msg = e.inner().to_string();
                let first = msg.lines().next().unwrap_or_default().to_string();
                config_error(format!("config field `{}`: {first}", e.path()))
            })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut cfg = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => ModelConfig::desk(),
            "smoke" => ModelConfig::smoke(),
            other => return Err(config_error(format!("config field `preset`: unknown preset `{other}`"))),
        };
        if let Some(v) = self.variant {
            cfg.fusion_variant = v;
        }
        if let Some(p) = self.pathway {
            cfg.pathway = p;
        }
        let m = &self.model;
        if let Some(n) = m.n_blocks {
            cfg.n_blocks = n;
        }
        if let Some(c) = &m.block_channels {
            cfg.block_channels = c.clone();
        }
        if let Some(s) = &m.block_strides {
            cfg.block_strides = s.clone();
        }
        if let Some(d) = m.block_depth {
            cfg.block_depth = d;
        }
        if let Some(c) = m.vfe_channels {
            cfg.vfe_channels = c;
        }
        if let Some(c) = m.static_vfe_channels {
            cfg.static_vfe_channels = c;
        }
        if let Some(c) = m.classes {
            cfg.classes = c;
        }
        if let Some(a) = &self.attention {
            let base = &cfg.attention;
            cfg.attention = AttentionConfig::new(
                a.neighborhood.unwrap_or(base.neighborhood),
                a.heads.unwrap_or(base.heads),
                base.token_dim,
            );
        }
        if let Some(g) = &self.grid {
            cfg.grid = match (&g.preset, g.half, g.pillar_size) {
                (Some(name), None, None) => GridConfig::preset(name).map_err(|e| config_error(format!("config field `grid.preset`: {e}")))?,
                (None, Some(half), Some(size)) => GridConfig::square(half, size),
                _ => return Err(config_error("config field `grid`: give either `preset` or both `half` and `pillar_size`")),
            };
        }
        cfg.validate().map_err(|e| config_error(format!("model configuration: {e}")))?;
        Ok(cfg)
    }

    pub fn train_options(&self, steps: usize) -> TrainOptions {
        TrainOptions {
            steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            augment: self.train.augment,
            seed: self.seed,
        }
    }
}
