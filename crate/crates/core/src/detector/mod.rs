//! Desk-scale two-stage detection pipeline: a miniature RCD proposal network
//! over range images, proposal selection, a per-box 3D refinement head, and a
//! deterministic toy trainer on synthetic scenes.

pub mod layers;
pub mod pipeline;
pub mod proposals;
pub mod rcnn;
pub mod rpn;
pub mod scene;
pub mod targets;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::boxgeom::BinConfig;
use crate::eval::EvalConfig;

/// Miniature detector widths and behavior switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Trunk width after the stem block.
    pub channels: usize,
    /// Second-stage stage width (after the deepest downsampling).
    pub deep_channels: usize,
    /// Per-point embedding width handed to the refinement stage.
    pub embed_channels: usize,
    /// Refinement 3D conv output channels.
    pub rcnn_conv_channels: usize,
    /// Refinement hidden width is fixed by the pooled grid; this is the
    /// number of heading bins shared with the box coder.
    pub rcd_pattern_rows: usize,
    pub rcd_pattern_cols: usize,
    pub rcd_squeeze_channels: usize,
    pub nominal_width_init: f64,
    pub gate_scale_init: f64,
    pub range_floor: f64,
    /// Insert additional RCD blocks at the downsampled stages, conditioned on
    /// max-pooled range.
    pub multi_scale_rcd: bool,
    /// Fixed-dilation baseline: replaces the range-conditioned dilation with
    /// a constant pixel rate and freezes the nominal width.
    pub fixed_dilation_px: Option<f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 32,
            deep_channels: 64,
            embed_channels: 16,
            rcnn_conv_channels: 8,
            rcd_pattern_rows: 8,
            rcd_pattern_cols: 8,
            rcd_squeeze_channels: 3,
            nominal_width_init: 1.0,
            gate_scale_init: 1.0,
            range_floor: 0.5,
            multi_scale_rcd: false,
            fixed_dilation_px: None,
        }
    }
}

/// Synthetic scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Ground plane height relative to the sensor, meters.
    pub ground_z: f64,
    /// Laser inclination extent (top, bottom), radians.
    pub incl_top: f64,
    pub incl_bottom: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 256,
            min_vehicles: 1,
            max_vehicles: 5,
            min_range: 5.0,
            max_range: 70.0,
            ground_z: -2.0,
            incl_top: 0.10,
            incl_bottom: -0.35,
        }
    }
}

/// Trainer settings for the toy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub scenes_per_iteration: usize,
    /// Positive / negative proposals drawn per scene for the second stage.
    pub proposals_pos: usize,
    pub proposals_neg: usize,
    /// Foreground score needed to decode a pixel's box at inference.
    pub score_threshold: f64,
    /// NMS threshold applied to first-stage proposals at inference.
    pub nms_iou: f64,
    /// Proposals surviving first-stage NMS.
    pub max_proposals: usize,
    /// NMS applied after refinement.
    pub final_nms_iou: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            iterations: 2000,
            learning_rate: 3e-3,
            scenes_per_iteration: 1,
            proposals_pos: 50,
            proposals_neg: 50,
            score_threshold: 0.3,
            nms_iou: 0.7,
            max_proposals: 400,
            final_nms_iou: 0.5,
        }
    }
}

/// Everything a run needs, in one schema-versioned document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub net: NetConfig,
    pub scene: SceneConfig,
    pub trainer: TrainerConfig,
    pub bins: BinConfig,
    pub eval: EvalConfig,
}

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

impl RunConfig {
    pub fn with_defaults() -> RunConfig {
        RunConfig { schema_version: RUN_CONFIG_SCHEMA_VERSION, seed: 20, ..Default::default() }
    }

    pub fn from_json(text: &str) -> crate::error::Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| crate::error::Error::Config(format!("run config: {}", e)))?;
        if cfg.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(crate::error::Error::Config(format!(
                "unsupported schema_version {} (expected {})",
                cfg.schema_version, RUN_CONFIG_SCHEMA_VERSION
            )));
        }
        Ok(cfg)
    }
}
