//! Dual-stream trajectory prediction: behavior-state and lane queries feed a
//! two-stage Laplace-mixture decoder with lane-continuity refinement.

pub mod behavior;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod graph;
pub mod lane;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod plot;
pub mod scene;
pub mod settings;
pub mod synth;
pub mod tensor;
pub mod train;
