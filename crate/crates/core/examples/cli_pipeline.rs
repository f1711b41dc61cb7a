//! Drives the command-line front end in-process: generate, train, eval and
//! predict with a small configuration file.

use std::fs;

use blnet::cli::run;

const CONFIG: &str = "\
model.hidden = 16
model.num_heads = 2
model.dropout = 0
train.stage1_steps = 40
train.stage2_steps = 10
data.count = 16
eval.k = 1, 5
";

fn main() {
    let dir = std::env::temp_dir().join("blnet-cli-pipeline");
    fs::create_dir_all(&dir).expect("dir");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, CONFIG).expect("config");
    let (cfg, data, out) = (
        cfg.display().to_string(),
        dir.join("data").display().to_string(),
        dir.join("run").display().to_string(),
    );
    let ckpt = format!("{out}/checkpoint.blnet");
    let scene = format!("{data}/scene_00000.json");
    let steps: [Vec<&str>; 4] = [
        vec!["--out", &data, "generate"],
        vec!["--out", &out, "train", "--data", &data],
        vec!["--out", &out, "eval", "--data", &data, "--checkpoint", &ckpt],
        vec!["--out", &out, "predict", "--checkpoint", &ckpt, "--scene", &scene],
    ];
    for args in steps {
        let mut full = vec!["blnet", "--config", &cfg, "--seed", "1"];
        full.extend(args);
        let r = run(full.clone());
        println!("$ {}\n[exit {}] {}\n", full.join(" "), r.exit_code, r.summary);
        if r.exit_code != 0 {
            std::process::exit(r.exit_code);
        }
    }
}
