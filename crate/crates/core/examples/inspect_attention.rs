//! Prints the lane scores, the selected segments and the attention of the
//! lane-aggregation block for one scene.
//!
//! cargo run --release --example inspect_attention -- [checkpoint]

use blnet::checkpoint;
use blnet::config::ModelConfig;
use blnet::graph::Graph;
use blnet::model::ModelParams;
use blnet::synth::{generate_scene, GeneratorConfig};

fn main() {
    let params = match std::env::args().nth(1) {
        Some(path) => checkpoint::load(&path).expect("checkpoint").0,
        None => ModelParams::init(ModelConfig::default(), 0).expect("config"),
    };
    let scene = generate_scene(&GeneratorConfig::default(), 3).expect("scene");
    let mut g = Graph::new(&params.store);
    let pass = params.model.forward(&mut g, &scene, true);
    let lane = pass.lane.as_ref().expect("lane branch enabled");
    let scores = g.value(lane.scores);
    let labels = &scene.ground_truth.lane_labels;
    println!("step  label  top segments (score)");
    for t in 0..scores.rows() {
        let picks: Vec<String> = lane.selection[t]
            .iter()
            .map(|&m| format!("{m} ({:.3})", scores.get(t, m)))
            .collect();
        println!("{t:>4}  {:>5}  {}", labels.get(t).copied().unwrap_or(0), picks.join(", "));
    }
    let attn = g.attention_weights(lane.aggregate_attention).expect("attention");
    println!("\naggregation attention, head 0");
    for q in 0..attn.queries {
        let row: Vec<String> = attn.row(0, q).iter().filter(|&&p| p > 0.0).map(|p| format!("{p:.3}")).collect();
        println!("query {q:>2}: {}", row.join(" "));
    }
    if let Some(s2) = &pass.stage2 {
        println!("\nnearest segments of mode 0: {:?}", (0..params.config().future_len).map(|t| &s2.nearest[t * params.config().num_modes]).collect::<Vec<_>>());
    }
}
