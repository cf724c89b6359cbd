//! Network architecture settings shared by the encoders and descent heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How keypoints enter the vertex branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    /// `k_j − v_i` for every keypoint, flattened.
    Relative,
    /// Raw keypoint coordinates.
    Concat,
    /// Distances `‖k_j − v_i‖`.
    Norm,
    /// Softmax-weighted sum of relative vectors.
    Attention,
    /// No keypoint input (plain vertex descent).
    None,
}

impl EncodingMode {
    pub fn name(self) -> &'static str {
        match self {
            EncodingMode::Relative => "relative",
            EncodingMode::Concat => "concat",
            EncodingMode::Norm => "norm",
            EncodingMode::Attention => "attention",
            EncodingMode::None => "none",
        }
    }

    /// Payload width per query for `k` keypoints.
    pub fn payload_dim(self, k: usize) -> usize {
        match self {
            EncodingMode::Relative | EncodingMode::Concat => 3 * k,
            EncodingMode::Norm => k,
            EncodingMode::Attention => 3,
            EncodingMode::None => 0,
        }
    }

    pub fn uses_keypoints(self) -> bool {
        self != EncodingMode::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image channels excluding the mask.
    pub in_channels: usize,
    /// Side of every feature map.
    pub feature_res: usize,
    /// Channels per hourglass stack output.
    pub feature_channels: usize,
    pub stacks: usize,
    pub norm_groups: usize,
    /// Channels of the fused keypoint feature map.
    pub keypoint_channels: usize,
    /// Width of the heatmap surrogate.
    pub heatmap_channels: usize,
    pub num_keypoints: usize,
    pub gk_hidden: usize,
    pub gv_hidden: usize,
    pub sdf_hidden: usize,
    pub encoding: EncodingMode,
    pub include_vertex_pos: bool,
    /// Feed the frozen heatmap surrogate into f_s.
    pub heatmap_prior: bool,
    /// Self-attention over all vertex queries before the vertex head.
    pub global_attention: bool,
    pub attention_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 5,
            feature_res: 64,
            feature_channels: 64,
            stacks: 4,
            norm_groups: 8,
            keypoint_channels: 64,
            heatmap_channels: 32,
            num_keypoints: 18,
            gk_hidden: 256,
            gv_hidden: 512,
            sdf_hidden: 256,
            encoding: EncodingMode::Relative,
            include_vertex_pos: true,
            heatmap_prior: true,
            global_attention: false,
            attention_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Width of the stacked vertex descriptor.
    pub fn descriptor_dim(&self) -> usize {
        self.feature_channels * self.stacks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_res < 4 || self.feature_res % 4 != 0 {
            return bad(format!("feature_res must be a positive multiple of 4, got {}", self.feature_res));
        }
        if self.stacks == 0 {
            return bad("stacks must be ≥ 1".into());
        }
        for (name, c) in [
            ("feature_channels", self.feature_channels),
            ("keypoint_channels", self.keypoint_channels),
            ("heatmap_channels", self.heatmap_channels),
        ] {
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return bad(format!("norm_groups {} must divide {name} = {c}", self.norm_groups));
            }
        }
        if self.encoding.uses_keypoints() && self.num_keypoints == 0 {
            return bad(format!("encoding `{}` needs num_keypoints ≥ 1", self.encoding.name()));
        }
        for (name, h) in [
            ("gk_hidden", self.gk_hidden),
            ("gv_hidden", self.gv_hidden),
            ("sdf_hidden", self.sdf_hidden),
            ("attention_hidden", self.attention_hidden),
            ("in_channels", self.in_channels),
        ] {
            if h == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        Ok(())
    }
}
