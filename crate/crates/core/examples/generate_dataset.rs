//! Writes a synthetic dataset and summarizes it.
//!
//! cargo run --release --example generate_dataset -- [out_dir] [count] [seed]

use std::collections::BTreeMap;

use blnet::synth::{generate_dataset, load_manifest, GeneratorConfig};
use blnet::train::load_dataset;

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "out/dataset".into());
    let count: usize = args.next().map_or(32, |a| a.parse().expect("count"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    let cfg = GeneratorConfig {
        seed,
        ..GeneratorConfig::default()
    };
    let manifest_path = generate_dataset(&cfg, count, &out).expect("generation");
    let manifest = load_manifest(&manifest_path).expect("manifest");
    let mut tags: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.scenes {
        *tags.entry(e.tag.as_str()).or_default() += 1;
    }
    println!("wrote {count} scenes to {out}");
    for (tag, n) in tags {
        println!("  {tag:<12} {n}");
    }
    let scenes = load_dataset(&manifest_path).expect("reload");
    let mean_len: f64 = scenes
        .iter()
        .map(|s| {
            let p = s.ground_truth.positions.last().unwrap();
            p[0].hypot(p[1])
        })
        .sum::<f64>()
        / scenes.len() as f64;
    println!("mean endpoint distance {mean_len:.2} m over {} steps", cfg.future_len);
}
