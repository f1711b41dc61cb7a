use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::CellKind;
use crate::synth::{AGENT_ATTR_DIM, LANE_ATTR_DIM};

#[derive(Debug, Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

/// How the two query streams are shaped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// `K x T_f` behavior queries and `T_f` lane queries.
    #[default]
    FineGrained,
    /// One goal per mode and one lane query, broadcast over the horizon.
    GoalOnly,
}

/// What the refinement pass does with the Laplace scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRefinement {
    #[default]
    Reestimate,
    KeepStage1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size `C_e`.
    pub hidden: usize,
    pub num_heads: usize,
    pub fusion_rounds: usize,
    /// Number of cross/self attention pairs in the behavior branch.
    pub behavior_depth: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub dropout: f64,
    /// Number of modes `K`.
    pub num_modes: usize,
    /// Prediction horizon `T_f`.
    pub future_len: usize,
    pub lane_attr_dim: usize,
    pub agent_attr_dim: usize,
    /// Lane segments kept per lane query (`M`).
    pub top_m: usize,
    /// Nearest segments per refined point (`N`).
    pub nearest_n: usize,
    pub use_behavior_branch: bool,
    pub use_lane_branch: bool,
    pub use_refinement: bool,
    pub use_lane_continuity: bool,
    pub decoder_cell: CellKind,
    pub query_mode: QueryMode,
    pub scale_refinement: ScaleRefinement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            num_heads: 8,
            fusion_rounds: 1,
            behavior_depth: 1,
            ff_mult: 2,
            dropout: 0.1,
            num_modes: 5,
            future_len: 12,
            lane_attr_dim: LANE_ATTR_DIM,
            agent_attr_dim: AGENT_ATTR_DIM,
            top_m: 2,
            nearest_n: 2,
            use_behavior_branch: true,
            use_lane_branch: true,
            use_refinement: true,
            use_lane_continuity: true,
            decoder_cell: CellKind::Gru,
            query_mode: QueryMode::FineGrained,
            scale_refinement: ScaleRefinement::Reestimate,
        }
    }
}

impl ModelConfig {
    /// Tiny shapes used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            num_heads: 1,
            dropout: 0.0,
            num_modes: 2,
            future_len: 3,
            top_m: 1,
            nearest_n: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.to_string()));
        if self.hidden == 0 || self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return bad("hidden size must be a positive multiple of num_heads");
        }
        if self.num_modes == 0 {
            return bad("num_modes must be at least 1");
        }
        if self.future_len == 0 {
            return bad("future_len must be positive");
        }
        if self.top_m == 0 || self.nearest_n == 0 {
            return bad("top_m and nearest_n must be at least 1");
        }
        if self.fusion_rounds == 0 || self.behavior_depth == 0 || self.ff_mult == 0 {
            return bad("fusion_rounds, behavior_depth and ff_mult must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn ff_hidden(&self) -> usize {
        self.hidden * self.ff_mult
    }

    /// Number of lane queries.
    pub fn lane_queries(&self) -> usize {
        match self.query_mode {
            QueryMode::FineGrained => self.future_len,
            QueryMode::GoalOnly => 1,
        }
    }
}
