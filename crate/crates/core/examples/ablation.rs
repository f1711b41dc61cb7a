//! Held-out comparison of three variants over several seeds: the full
//! fine-grained model without refinement, the same with refinement and lane
//! continuity, and the goal-only query ablation.
//!
//! cargo run --release --example ablation -- [seeds] [stage1_steps] [stage2_steps]

use std::time::Instant;

use blnet::config::{ModelConfig, QueryMode};
use blnet::model::ModelParams;
use blnet::scene::Scene;
use blnet::synth::{generate_scene, GeneratorConfig};
use blnet::train::{evaluate, train, TrainConfig};

fn scenes(seed: u64, count: u64) -> Vec<Scene> {
    let cfg = GeneratorConfig {
        seed,
        ..GeneratorConfig::default()
    };
    (0..count).map(|i| generate_scene(&cfg, i).expect("scene")).collect()
}

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let seeds = args.first().copied().unwrap_or(3);
    let s1 = args.get(1).copied().unwrap_or(1200) as usize;
    let s2 = args.get(2).copied().unwrap_or(300) as usize;
    let n_train = args.get(3).copied().unwrap_or(512);
    let train_set = scenes(1000, n_train);
    let val = scenes(2000, 256);
    let base = ModelConfig {
        hidden: 32,
        num_heads: 4,
        ..ModelConfig::default()
    };
    let variants = [
        ("fine, no refinement", ModelConfig { use_refinement: false, use_lane_continuity: false, ..base.clone() }, s1 + s2, 0),
        ("fine, refinement", base.clone(), s1, s2),
        ("goal-only, no refinement", ModelConfig { use_refinement: false, use_lane_continuity: false, query_mode: QueryMode::GoalOnly, ..base.clone() }, s1 + s2, 0),
    ];
    println!("{:<28} {:>5} {:>9} {:>9} {:>9} {:>8}", "variant", "seed", "minADE_5", "minFDE_1", "minFDE_5", "time_s");
    for (name, cfg, steps1, steps2) in variants {
        let (mut ade, mut fde1) = (0.0, 0.0);
        for seed in 0..seeds {
            let t = Instant::now();
            let mut params = ModelParams::init(cfg.clone(), seed).expect("config");
            let tc = TrainConfig { batch_size: 16, stage1_steps: steps1, stage2_steps: steps2, seed, ..TrainConfig::default() };
            train(&mut params, &tc, &train_set, |_, _| true).expect("training");
            let r = evaluate(&params, &val, &[1, 5], true).expect("eval");
            let (m1, m5) = (r.at(1).unwrap(), r.at(5).unwrap());
            ade += m5.min_ade / seeds as f64;
            fde1 += m1.min_fde / seeds as f64;
            println!("{name:<28} {seed:>5} {:>9.4} {:>9.4} {:>9.4} {:>8.0}", m5.min_ade, m1.min_fde, m5.min_fde, t.elapsed().as_secs_f64());
        }
        println!("{name:<28} {:>5} {ade:>9.4} {fde1:>9.4}", "mean");
    }
}
