//! Trains both stages on generated scenes and saves a checkpoint.
//!
//! cargo run --release --example train_model -- [stage1_steps] [stage2_steps] [out_dir]

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use blnet::checkpoint::{self, CheckpointHeader};
use blnet::config::ModelConfig;
use blnet::model::ModelParams;
use blnet::synth::{generate_scene, GeneratorConfig};
use blnet::train::{evaluate, train, LossLog, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let stage1: usize = args.next().map_or(300, |a| a.parse().expect("steps"));
    let stage2: usize = args.next().map_or(100, |a| a.parse().expect("steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train".into()));
    fs::create_dir_all(&out).expect("output dir");

    let gen = GeneratorConfig::default();
    let scenes: Vec<_> = (0..128).map(|i| generate_scene(&gen, i).expect("scene")).collect();
    let held_out: Vec<_> = (0..32)
        .map(|i| generate_scene(&GeneratorConfig { seed: 1, ..gen.clone() }, i).expect("scene"))
        .collect();

    let model = ModelConfig {
        hidden: 32,
        num_heads: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        stage1_steps: stage1,
        stage2_steps: stage2,
        ..TrainConfig::default()
    };
    let mut params = ModelParams::init(model.clone(), tc.seed).expect("config");
    println!("{} parameters", params.store.num_scalars());

    let mut log = LossLog::new(BufWriter::new(fs::File::create(out.join("loss_log.tsv")).expect("log"))).expect("log");
    let summary = train(&mut params, &tc, &scenes, |row, _| {
        log.write(row).expect("log");
        if row.step % 50 == 0 {
            println!("stage {:?} step {:>4} loss {:.4} |g| {:.3}", row.stage, row.step, row.total, row.grad_norm);
        }
        true
    })
    .expect("training");
    log.flush().expect("log");

    let header = CheckpointHeader {
        model,
        stage1_steps: summary.stage1_steps,
        stage2_steps: summary.stage2_steps,
    };
    let path = out.join("checkpoint.blnet");
    checkpoint::save(&params, &header, &path).expect("checkpoint");
    println!("saved {}", path.display());
    let report = evaluate(&params, &held_out, &[1, 5], true).expect("eval");
    println!("{report}");
}
