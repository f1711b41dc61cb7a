//! Command-line front end. Every command returns a [`CommandResult`]
//! instead of exiting, so it can be driven from tests.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, CheckpointHeader};
use crate::model::{predict, ModelParams};
use crate::plot::render_svg;
use crate::scene::{load_scene, normalize_to_target_frame, Frame};
use crate::settings::RunConfig;
use crate::synth::generate_dataset;
use crate::train::{evaluate, load_dataset, train, LossLog, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.blnet";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn ok(artifacts: Vec<PathBuf>, summary: String) -> Self {
        Self {
            exit_code: EXIT_OK,
            artifacts,
            summary,
        }
    }

    fn fail(exit_code: i32, summary: impl Into<String>) -> Self {
        Self {
            exit_code,
            artifacts: Vec::new(),
            summary: summary.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "blnet", about = "Dual-stream trajectory prediction on synthetic scenes")]
pub struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Extra `section.key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes and a manifest.
    Generate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a generated dataset; writes a checkpoint and a loss log.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Print the metric table of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        no_refine: bool,
    },
    /// Predict scenes and write a JSON dump and an SVG plot for each.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        no_refine: bool,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            CommandResult::fail(code, e.to_string())
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::new(),
    };
    for (i, o) in cli.overrides.iter().enumerate() {
        cfg.apply_text(o, &format!("--set #{}", i + 1))
            .map_err(|e| e.to_string())?;
    }
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CommandResult {
    let cfg = match run_config(cli) {
        Ok(c) => c,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e),
    };
    if let Err(e) = fs::create_dir_all(&cli.out) {
        return CommandResult::fail(EXIT_USAGE, format!("cannot create {}: {e}", cli.out.display()));
    }
    match &cli.command {
        Command::Generate { count } => cmd_generate(&cfg, count.unwrap_or(cfg.count), &cli.out),
        Command::Train {
            data,
            stage1_steps,
            stage2_steps,
            learning_rate,
        } => {
            let mut cfg = cfg;
            if let Some(s) = stage1_steps {
                cfg.train.stage1_steps = *s;
            }
            if let Some(s) = stage2_steps {
                cfg.train.stage2_steps = *s;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            cmd_train(&cfg, data, &cli.out)
        }
        Command::Eval {
            data,
            checkpoint,
            k,
            no_refine,
        } => {
            let ks = if k.is_empty() { cfg.eval.ks.clone() } else { k.clone() };
            cmd_eval(data, checkpoint, &ks, cfg.eval.refine && !no_refine, &cli.out)
        }
        Command::Predict {
            checkpoint,
            scene,
            no_refine,
        } => cmd_predict_plot(checkpoint, scene, !no_refine, &cli.out),
    }
}

pub fn cmd_generate(cfg: &RunConfig, count: usize, out: &Path) -> CommandResult {
    if count == 0 {
        return CommandResult::fail(EXIT_USAGE, "--count must be at least 1");
    }
    match generate_dataset(&cfg.data, count, out) {
        Ok(manifest) => {
            let mut artifacts: Vec<PathBuf> = (0..count)
                .map(|i| out.join(crate::synth::scene_file_name(i)))
                .collect();
            artifacts.push(manifest.clone());
            CommandResult::ok(
                artifacts,
                format!("wrote {count} scenes and {}", manifest.display()),
            )
        }
        Err(e) => CommandResult::fail(EXIT_USAGE, e.to_string()),
    }
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CommandResult {
    let scenes = match load_dataset(data) {
        Ok(s) if s.is_empty() => return CommandResult::fail(EXIT_USAGE, "dataset has no scenes"),
        Ok(s) => s,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let mut params = match ModelParams::init(cfg.model.clone(), cfg.train.seed) {
        Ok(p) => p,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    if let Some(e) = scenes.iter().find_map(|s| params.model.check_scene(s).err()) {
        return CommandResult::fail(EXIT_USAGE, e.to_string());
    }
    let log_path = out.join(LOSS_LOG_FILE);
    let file = match fs::File::create(&log_path) {
        Ok(f) => f,
        Err(e) => return CommandResult::fail(EXIT_USAGE, format!("cannot create {}: {e}", log_path.display())),
    };
    let mut log = match LossLog::new(std::io::BufWriter::new(file)) {
        Ok(l) => l,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let mut io_error = None;
    let result = train(&mut params, &cfg.train, &scenes, |row, _| match log.write(row) {
        Ok(()) => true,
        Err(e) => {
            io_error = Some(e);
            false
        }
    });
    let flushed = log.flush();
    if let Some(e) = io_error.or(flushed.err()) {
        return CommandResult::fail(EXIT_USAGE, format!("cannot write {}: {e}", log_path.display()));
    }
    let summary = match result {
        Ok(s) => s,
        Err(e @ TrainError::NonFinite { .. }) => {
            return CommandResult {
                exit_code: EXIT_NUMERIC,
                artifacts: vec![log_path],
                summary: format!("training aborted: {e}"),
            }
        }
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let header = CheckpointHeader {
        model: cfg.model.clone(),
        stage1_steps: summary.stage1_steps,
        stage2_steps: summary.stage2_steps,
    };
    if let Err(e) = checkpoint::save(&params, &header, &ckpt) {
        return CommandResult::fail(EXIT_USAGE, e.to_string());
    }
    CommandResult::ok(
        vec![ckpt.clone(), log_path],
        format!(
            "trained {} + {} steps on {} scenes, final loss {:.6}, checkpoint {}",
            summary.stage1_steps,
            summary.stage2_steps,
            scenes.len(),
            summary.final_loss.unwrap_or(f64::NAN),
            ckpt.display()
        ),
    )
}

pub fn cmd_eval(data: &Path, ckpt: &Path, ks: &[usize], refine: bool, out: &Path) -> CommandResult {
    let scenes = match load_dataset(data) {
        Ok(s) => s,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    if scenes.is_empty() {
        return CommandResult::fail(EXIT_USAGE, "dataset has no scenes");
    }
    let (params, _) = match checkpoint::load(ckpt) {
        Ok(p) => p,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let report = match evaluate(&params, &scenes, ks, refine) {
        Ok(r) => r,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let path = out.join(METRICS_FILE);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = fs::write(&path, text) {
        return CommandResult::fail(EXIT_USAGE, format!("cannot write {}: {e}", path.display()));
    }
    CommandResult::ok(vec![path], report.to_string())
}

pub fn cmd_predict_plot(ckpt: &Path, scenes: &[PathBuf], refine: bool, out: &Path) -> CommandResult {
    let (params, _) = match checkpoint::load(ckpt) {
        Ok(p) => p,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let mut artifacts = Vec::new();
    for path in scenes {
        let scene = match load_scene(path) {
            Ok(s) if s.meta.frame == Frame::World => normalize_to_target_frame(&s),
            other => other,
        };
        let scene = match scene {
            Ok(s) => s,
            Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
        };
        let pred = match predict(&params, &scene, refine) {
            Ok(p) => p,
            Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        let json_path = out.join(format!("{stem}.prediction.json"));
        let svg_path = out.join(format!("{stem}.svg"));
        let json = serde_json::to_string_pretty(&pred).expect("prediction serializes");
        for (p, body) in [(&json_path, json), (&svg_path, render_svg(&scene, &pred))] {
            if let Err(e) = fs::write(p, body) {
                return CommandResult::fail(EXIT_USAGE, format!("cannot write {}: {e}", p.display()));
            }
        }
        artifacts.push(json_path);
        artifacts.push(svg_path);
    }
    CommandResult::ok(
        artifacts,
        format!(
            "predicted {} scene(s) ({})",
            scenes.len(),
            if refine { "refined" } else { "stage 1" }
        ),
    )
}
