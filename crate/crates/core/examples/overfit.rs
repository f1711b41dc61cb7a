//! Fits eight scenes with stage one only and reports how close it gets.
//!
//! cargo run --release --example overfit -- [max_steps]

use std::time::Instant;

use blnet::config::ModelConfig;
use blnet::model::ModelParams;
use blnet::objectives::Stage;
use blnet::synth::{generate_scene, GeneratorConfig};
use blnet::train::{evaluate, train_stage, TrainConfig};

fn main() {
    let steps: usize = std::env::args().nth(1).map_or(3000, |a| a.parse().expect("steps"));
    let gen = GeneratorConfig {
        seed: 11,
        ..GeneratorConfig::default()
    };
    let scenes: Vec<_> = (0..8).map(|i| generate_scene(&gen, i).expect("scene")).collect();
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(cfg, 3).expect("config");
    let tc = TrainConfig {
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut first = None;
    train_stage(&mut params, &tc, &scenes, Stage::One, steps, |row, p| {
        let wta = row.components.behavior.unwrap_or(f64::NAN);
        let first = *first.get_or_insert(wta);
        if (row.step + 1) % 250 != 0 {
            return true;
        }
        let r = evaluate(p, &scenes, &[5], false).expect("eval");
        let (ade, lane) = (r.mean[0].min_ade, r.lane_top1.unwrap_or(0.0));
        println!(
            "step {:>5}  {:>5.0}s  loss {:>8.4}  minADE_5 {ade:.4}  lane top-1 {lane:.3}  behavior {:.2}%",
            row.step + 1,
            start.elapsed().as_secs_f64(),
            row.total,
            100.0 * wta / first
        );
        !(ade < 0.1 && lane > 0.95 && wta < 0.01 * first)
    })
    .expect("training");
}
