//! Compares stage-one and refined metrics of a checkpoint on held-out scenes.
//!
//! cargo run --release --example evaluate -- <checkpoint> [count]
//!
//! Without a checkpoint an untrained model is evaluated.

use blnet::checkpoint;
use blnet::config::ModelConfig;
use blnet::model::ModelParams;
use blnet::synth::{generate_scene, GeneratorConfig};
use blnet::train::evaluate;

fn main() {
    let mut args = std::env::args().skip(1);
    let params = match args.next() {
        Some(path) => checkpoint::load(&path).expect("checkpoint").0,
        None => ModelParams::init(ModelConfig::default(), 0).expect("config"),
    };
    let count: u64 = args.next().map_or(64, |a| a.parse().expect("count"));
    let gen = GeneratorConfig {
        seed: 2000,
        future_len: params.config().future_len,
        ..GeneratorConfig::default()
    };
    let scenes: Vec<_> = (0..count).map(|i| generate_scene(&gen, i).expect("scene")).collect();
    let k = params.config().num_modes;
    let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&x| x <= k).collect();
    for refine in [false, true] {
        let r = evaluate(&params, &scenes, &ks, refine).expect("eval");
        println!("{}\n{r}\n", if refine { "refined" } else { "stage one" });
    }
}
