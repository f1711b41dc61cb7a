//! Predicts one generated scene and writes an SVG plot and a JSON dump.
//!
//! cargo run --release --example predict_plot -- [checkpoint] [scene_index]

use std::fs;

use blnet::checkpoint;
use blnet::config::ModelConfig;
use blnet::model::{predict, ModelParams};
use blnet::plot::render_svg;
use blnet::synth::{generate_scene, GeneratorConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let params = match args.next().filter(|a| a != "-") {
        Some(path) => checkpoint::load(&path).expect("checkpoint").0,
        None => ModelParams::init(ModelConfig::default(), 0).expect("config"),
    };
    let index: u64 = args.next().map_or(0, |a| a.parse().expect("index"));
    let scene = generate_scene(&GeneratorConfig::default(), index).expect("scene");
    let pred = predict(&params, &scene, true).expect("predict");
    for (k, m) in pred.modes.iter().enumerate() {
        let end = m.positions.last().unwrap();
        println!("mode {k}: p={:.3} endpoint ({:.2}, {:.2})", m.probability, end[0], end[1]);
    }
    fs::create_dir_all("out").expect("out dir");
    fs::write("out/prediction.svg", render_svg(&scene, &pred)).expect("svg");
    fs::write("out/prediction.json", serde_json::to_string_pretty(&pred).unwrap()).expect("json");
    println!("wrote out/prediction.svg and out/prediction.json");
}
