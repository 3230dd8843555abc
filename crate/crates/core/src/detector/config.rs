use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pyramid and proposal convolutions receive coordinate channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordPlacement {
    pub fpn_lateral: bool,
    pub fpn_output: bool,
    pub rpn_head: bool,
}

impl CoordPlacement {
    pub const ALL: CoordPlacement = CoordPlacement {
        fpn_lateral: true,
        fpn_output: true,
        rpn_head: true,
    };
    pub const NONE: CoordPlacement = CoordPlacement {
        fpn_lateral: false,
        fpn_output: false,
        rpn_head: false,
    };
}

/// Architecture and box-sampling settings of the two-stage detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub in_channels: usize,
    /// Output channels of each backbone stage, one per pyramid level.
    pub backbone_widths: Vec<usize>,
    /// Pixel stride of each pyramid level; consecutive levels double.
    pub strides: Vec<usize>,
    pub fpn_channels: usize,
    pub num_classes: usize,
    pub coord_placement: CoordPlacement,
    /// When false the coordinate channels are present but filled with zeros
    /// (the ablated model keeps identical parameter shapes).
    pub coord_channels: bool,
    /// Anchor side at scale 1 is `anchor_size_factor × stride`.
    pub anchor_size_factor: f64,
    pub anchor_scales: Vec<f64>,
    /// Height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_post_nms_top_n: usize,
    pub rpn_nms_threshold: f64,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub roi_batch_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f64,
    pub roi_pool: usize,
    pub roi_sampling: usize,
    pub roi_hidden: usize,
    pub det_score_threshold: f64,
    pub det_nms_threshold: f64,
    pub det_max_per_image: usize,
    pub disc_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            in_channels: 3,
            backbone_widths: vec![16, 32, 64, 64],
            strides: vec![4, 8, 16, 32],
            fpn_channels: 32,
            num_classes: 1,
            coord_placement: CoordPlacement::ALL,
            coord_channels: true,
            anchor_size_factor: 2.0,
            anchor_scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_top_n: 1000,
            rpn_post_nms_top_n: 300,
            rpn_nms_threshold: 0.7,
            rpn_batch_per_image: 256,
            rpn_positive_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch_per_image: 128,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_pool: 7,
            roi_sampling: 2,
            roi_hidden: 256,
            det_score_threshold: 0.001,
            det_nms_threshold: 0.5,
            det_max_per_image: 100,
            disc_hidden: 64,
        }
    }
}

impl DetectorConfig {
    /// Small network for 64×64 CPU-scale experiments.
    pub fn toy() -> Self {
        DetectorConfig {
            backbone_widths: vec![8, 16, 16, 16],
            fpn_channels: 16,
            rpn_pre_nms_top_n: 100,
            rpn_post_nms_top_n: 32,
            rpn_batch_per_image: 64,
            roi_batch_per_image: 32,
            roi_pool: 3,
            roi_hidden: 64,
            det_max_per_image: 20,
            disc_hidden: 8,
            ..Default::default()
        }
    }

    /// Two-level variant of [`DetectorConfig::toy`] whose receptive field stays
    /// well inside a 64-pixel-wide canvas.
    pub fn shallow() -> Self {
        DetectorConfig {
            backbone_widths: vec![8, 16],
            strides: vec![4, 8],
            ..Self::toy()
        }
    }

    /// A two-channel, three-level network sized for 8×8 inputs and finite-difference probes.
    pub fn miniature() -> Self {
        DetectorConfig {
            backbone_widths: vec![2, 2, 2],
            strides: vec![2, 4, 8],
            fpn_channels: 2,
            anchor_scales: vec![1.0],
            anchor_ratios: vec![1.0],
            rpn_pre_nms_top_n: 16,
            rpn_post_nms_top_n: 8,
            rpn_batch_per_image: 16,
            roi_batch_per_image: 8,
            roi_pool: 2,
            roi_hidden: 4,
            det_max_per_image: 8,
            disc_hidden: 2,
            ..Default::default()
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn top_stride(&self) -> usize {
        *self.strides.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.strides.len() < 2 {
            return bad("at least two pyramid levels are required");
        }
        if self.backbone_widths.len() != self.strides.len() {
            return bad("one backbone width per pyramid level is required");
        }
        if !self.strides[0].is_power_of_two() || self.strides[0] < 2 {
            return bad("the first stride must be a power of two ≥ 2");
        }
        if self.strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad("pyramid strides must double per level");
        }
        if self.backbone_widths.contains(&0)
            || self.fpn_channels == 0
            || self.in_channels == 0
        {
            return bad("channel widths must be positive");
        }
        if self.num_classes == 0 || self.num_anchors() == 0 {
            return bad("need at least one class and one anchor");
        }
        if self.roi_pool == 0
            || self.roi_sampling == 0
            || self.roi_hidden == 0
            || self.disc_hidden == 0
        {
            return bad("pooling and hidden sizes must be positive");
        }
        Ok(())
    }
}
