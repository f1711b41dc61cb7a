//! Run configuration read from flat `section.key = value` files.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys and
//! malformed values are errors that name the offending line.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::config::{ModelConfig, QueryMode, ScaleRefinement};
use crate::nn::CellKind;
use crate::synth::{GeneratorConfig, ScenarioKind};
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum SettingsError {
    #[error("{origin}:{line}: {message}")]
    Line {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub refine: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![1, 5],
            refine: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorConfig,
    /// Number of scenes `generate` writes.
    pub count: usize,
    pub eval: EvalSettings,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|p| parse(p.trim())).collect()
}

impl RunConfig {
    pub fn new() -> Self {
        Self {
            count: 64,
            ..Self::default()
        }
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.hidden" => m.hidden = parse(v)?,
            "model.num_heads" => m.num_heads = parse(v)?,
            "model.fusion_rounds" => m.fusion_rounds = parse(v)?,
            "model.behavior_depth" => m.behavior_depth = parse(v)?,
            "model.ff_mult" => m.ff_mult = parse(v)?,
            "model.dropout" => m.dropout = parse(v)?,
            "model.num_modes" => m.num_modes = parse(v)?,
            "model.future_len" => m.future_len = parse(v)?,
            "model.lane_attr_dim" => m.lane_attr_dim = parse(v)?,
            "model.agent_attr_dim" => m.agent_attr_dim = parse(v)?,
            "model.top_m" => m.top_m = parse(v)?,
            "model.nearest_n" => m.nearest_n = parse(v)?,
            "model.use_behavior_branch" => m.use_behavior_branch = parse_bool(v)?,
            "model.use_lane_branch" => m.use_lane_branch = parse_bool(v)?,
            "model.use_refinement" => m.use_refinement = parse_bool(v)?,
            "model.use_lane_continuity" => m.use_lane_continuity = parse_bool(v)?,
            "model.decoder_cell" => {
                m.decoder_cell = match v {
                    "gru" => CellKind::Gru,
                    "lstm" => CellKind::Lstm,
                    _ => return Err(format!("decoder_cell must be gru or lstm, got {v:?}")),
                }
            }
            "model.query_mode" => {
                m.query_mode = match v {
                    "fine_grained" => QueryMode::FineGrained,
                    "goal_only" => QueryMode::GoalOnly,
                    _ => return Err(format!("query_mode must be fine_grained or goal_only, got {v:?}")),
                }
            }
            "model.scale_refinement" => {
                m.scale_refinement = match v {
                    "reestimate" => ScaleRefinement::Reestimate,
                    "keep_stage1" => ScaleRefinement::KeepStage1,
                    _ => return Err(format!("scale_refinement must be reestimate or keep_stage1, got {v:?}")),
                }
            }
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.stage1_steps" => t.stage1_steps = parse(v)?,
            "train.stage2_steps" => t.stage2_steps = parse(v)?,
            "train.learning_rate" => t.learning_rate = parse(v)?,
            "train.clip_norm" => t.clip_norm = parse(v)?,
            "train.freeze_stage1" => t.freeze_stage1 = parse_bool(v)?,
            "train.seed" => t.seed = parse(v)?,
            "loss.lane" => t.loss.lane = parse(v)?,
            "loss.behavior" => t.loss.behavior = parse(v)?,
            "loss.deviation" => t.loss.deviation = parse(v)?,
            "loss.angle" => t.loss.angle = parse(v)?,
            "loss.tau" => t.loss.tau = parse(v)?,
            "data.seed" => d.seed = parse(v)?,
            "data.count" => self.count = parse(v)?,
            "data.num_segments" => d.num_segments = parse(v)?,
            "data.vectors_per_segment" => d.vectors_per_segment = parse(v)?,
            "data.num_agents" => d.num_agents = parse(v)?,
            "data.history_len" => d.history_len = parse(v)?,
            "data.future_len" => d.future_len = parse(v)?,
            "data.speed_min" => d.speed_range.0 = parse(v)?,
            "data.speed_max" => d.speed_range.1 = parse(v)?,
            "data.noise_std" => d.noise_std = parse(v)?,
            "data.dt" => d.dt = parse(v)?,
            "eval.k" => self.eval.ks = parse_list(v)?,
            "eval.refine" => self.eval.refine = parse_bool(v)?,
            _ => {
                let kind = key
                    .strip_prefix("data.mix.")
                    .and_then(ScenarioKind::from_tag)
                    .ok_or_else(|| format!("unknown key {key:?}"))?;
                *d.scenario_mix.weight_mut(kind) = parse(v)?;
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), SettingsError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SettingsError::Line {
                origin: origin.to_string(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self, SettingsError> {
        let mut c = Self::new();
        c.apply_text(text, origin)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SettingsError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SettingsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c = RunConfig::from_text(
            "# overfit\nmodel.hidden = 32\nmodel.query_mode = goal_only\ntrain.stage2_steps=0\ndata.mix.left_turn = 0.5\neval.k = 1, 5\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.model.query_mode, QueryMode::GoalOnly);
        assert_eq!(c.train.stage2_steps, 0);
        assert_eq!(c.data.scenario_mix.weight(ScenarioKind::LeftTurn), 0.5);
        assert_eq!(c.eval.ks, vec![1, 5]);
        let e = RunConfig::from_text("model.hidden = 8\nmodel.colour = red\n", "t").unwrap_err();
        assert_eq!(e.to_string(), "t:2: unknown key \"model.colour\"");
    }
}
