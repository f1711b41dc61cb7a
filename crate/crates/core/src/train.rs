//! Two-stage training loop, Adam, evaluation and the loss log.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::REFINE_PREFIX;
use crate::graph::Graph;
use crate::lane::select_top_m;
use crate::model::{extract_prediction, ModelError, ModelParams};
use crate::objectives::{KMetrics, LossComponents, LossWeights, MetricsReport, SceneMetrics, Stage};
use crate::params::{Gradients, ParamStore};
use crate::scene::{load_scene, Scene, SceneError};
use crate::synth::{load_manifest, GenError, MANIFEST_NAME};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Only refinement parameters move during stage two.
    pub freeze_stage1: bool,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            stage1_steps: 2000,
            stage2_steps: 500,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            freeze_stage1: false,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} at stage {stage:?} step {step}")]
    NonFinite {
        component: String,
        stage: Stage,
        step: usize,
    },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && max_norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Number of parameters that have optimizer state.
    pub fn tracked(&self) -> usize {
        self.m.iter().filter(|m| m.is_some()).count()
    }

    /// Updates every parameter that has a gradient and passes `trainable`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, trainable: impl Fn(&str) -> bool) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            if !trainable(store.name(id)) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub total: f64,
    pub components: LossComponents,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step\tstage\tlr\ttotal\treg\tcls\tlane\tbehavior\tdeviation\tangle\tgrad_norm";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        let c = &self.components;
        let stage = match self.stage {
            Stage::One => 1,
            Stage::Two => 2,
        };
        let mut s = String::new();
        write!(
            s,
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}\t{}\t{}\t{:.6e}",
            self.step,
            stage,
            self.lr,
            self.total,
            c.reg,
            c.cls,
            opt(c.lane),
            opt(c.behavior),
            opt(c.deviation),
            opt(c.angle),
            self.grad_norm
        )
        .unwrap();
        s
    }
}

/// Averaged loss and gradients of one batch.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&Scene],
    stage: Stage,
    weights: &LossWeights,
    dropout_seed: Option<u64>,
) -> Result<(f64, LossComponents, Gradients), ModelError> {
    let model = &params.model;
    let mut grads = Gradients::zeros_like(&params.store);
    let mut total = 0.0;
    let mut comps = LossComponents::default();
    let refine = stage == Stage::Two;
    let n = batch.len() as f64;
    for (i, scene) in batch.iter().enumerate() {
        model.check_scene(scene)?;
        let mut g = Graph::new(&params.store);
        if let (Some(seed), rate) = (dropout_seed, model.config.dropout) {
            if rate > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                g.enable_dropout(rate, rng);
            }
        }
        let pass = model.forward(&mut g, scene, refine);
        let loss = model
            .loss(&mut g, &pass, scene, weights, stage)
            .ok_or_else(|| ModelError::SceneMismatch("stage two needs refinement enabled".into()))?;
        total += g.value(loss.total).item() / n;
        accumulate(&mut comps, &loss.components, 1.0 / n);
        grads.merge(&g.backward(loss.total));
    }
    grads.scale(1.0 / n);
    Ok((total, comps, grads))
}

fn accumulate(acc: &mut LossComponents, c: &LossComponents, w: f64) {
    let add = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + w * b);
        }
    };
    acc.reg += w * c.reg;
    acc.cls += w * c.cls;
    add(&mut acc.lane, c.lane);
    add(&mut acc.behavior, c.behavior);
    add(&mut acc.deviation, c.deviation);
    add(&mut acc.angle, c.angle);
}

fn check_finite(row: &LogRow, grads: &Gradients) -> Result<(), TrainError> {
    let fail = |component: &str| {
        Err(TrainError::NonFinite {
            component: component.to_string(),
            stage: row.stage,
            step: row.step,
        })
    };
    for (name, v) in row.components.named() {
        if !v.is_finite() {
            return fail(name);
        }
    }
    if !row.total.is_finite() {
        return fail("total");
    }
    if !row.grad_norm.is_finite() || !grads.all_finite() {
        return fail("gradient");
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub final_loss: Option<f64>,
}

/// Runs `steps` optimizer steps of one stage. `on_step` sees every log row
/// and may stop training early by returning `false`.
pub fn train_stage(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    scenes: &[Scene],
    stage: Stage,
    steps: usize,
    mut on_step: impl FnMut(&LogRow, &ModelParams) -> bool,
) -> Result<usize, TrainError> {
    if steps == 0 {
        return Ok(0);
    }
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    if stage == Stage::Two && params.model.decoder.refiner.is_none() {
        return Err(TrainError::Config("stage two needs refinement enabled".into()));
    }
    let stage_tag = match stage {
        Stage::One => 1,
        Stage::Two => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stage_tag);
    let mut adam = Adam::new(&params.store);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    let frozen = stage == Stage::Two && cfg.freeze_stage1;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size.min(scenes.len()));
        while batch.len() < cfg.batch_size.min(scenes.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&scenes[order[cursor]]);
            cursor += 1;
        }
        let lr = cosine_lr(cfg.learning_rate, step, steps);
        let dropout_seed = cfg.seed ^ ((stage_tag << 40) + step as u64);
        let (total, components, mut grads) =
            batch_gradients(params, &batch, stage, &cfg.loss, Some(dropout_seed))?;
        let grad_norm = grads.global_norm();
        let row = LogRow {
            step,
            stage,
            lr,
            total,
            components,
            grad_norm,
        };
        check_finite(&row, &grads)?;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut params.store, &grads, lr, |name| {
            !frozen || name.starts_with(REFINE_PREFIX)
        });
        if !on_step(&row, params) {
            return Ok(step + 1);
        }
    }
    Ok(steps)
}

/// Stage one followed by stage two (when refinement is enabled).
pub fn train(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    scenes: &[Scene],
    mut on_step: impl FnMut(&LogRow, &ModelParams) -> bool,
) -> Result<TrainSummary, TrainError> {
    let mut last = None;
    let mut cb = |row: &LogRow, p: &ModelParams| {
        last = Some(row.total);
        on_step(row, p)
    };
    let s1 = train_stage(params, cfg, scenes, Stage::One, cfg.stage1_steps, &mut cb)?;
    let s2 = if params.model.decoder.refiner.is_some() {
        train_stage(params, cfg, scenes, Stage::Two, cfg.stage2_steps, &mut cb)?
    } else {
        0
    };
    Ok(TrainSummary {
        stage1_steps: s1,
        stage2_steps: s2,
        final_loss: last,
    })
}

/// Writes log rows as TSV, header first.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &LogRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.to_tsv())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Metrics of the final-stage output over `scenes` for every `K_eval` in
/// `ks`, each evaluated on the most probable modes.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], ks: &[usize], refine: bool) -> Result<MetricsReport, ModelError> {
    let cfg = params.config();
    if scenes.is_empty() {
        return Err(ModelError::NoScenes);
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > cfg.num_modes) {
        return Err(ModelError::SceneMismatch(format!(
            "K_eval {k} outside 1..={}",
            cfg.num_modes
        )));
    }
    let mut rows = Vec::with_capacity(scenes.len());
    for (index, scene) in scenes.iter().enumerate() {
        params.model.check_scene(scene)?;
        let mut g = Graph::new(&params.store);
        let pass = params.model.forward(&mut g, scene, refine);
        let pred = extract_prediction(&g, &pass, cfg.num_modes, cfg.future_len);
        let (trajs, probs) = (pred.positions(), pred.probabilities());
        let gt = &scene.ground_truth.positions;
        let per_k = ks.iter().map(|&k| KMetrics::of(&trajs, &probs, gt, k)).collect();
        let lane_hits = match (&params.model.lane, &pred.lane_scores) {
            (Some(branch), Some(scores)) => {
                let labels = branch.supervised_labels(&scene.ground_truth.lane_labels);
                let valid = scene.segment_valid();
                let hits = scores
                    .iter()
                    .zip(&labels)
                    .filter(|(row, &label)| select_top_m(row, &valid, 1).first() == Some(&label))
                    .count();
                Some((hits, labels.len()))
            }
            _ => None,
        };
        rows.push(SceneMetrics {
            index,
            per_k,
            lane_hits,
        });
    }
    Ok(MetricsReport::from_scenes(ks, rows))
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Loads every scene listed in a manifest. `path` may be the manifest file
/// or the directory holding it.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>, DataError> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let manifest = load_manifest(&manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .scenes
        .iter()
        .map(|e| load_scene(dir.join(&e.path)).map_err(DataError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut grads = Gradients::zeros_like(&store);
        grads.accumulate(id, &Tensor::from_vec(1, 2, vec![0.5, -3.0]));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, 0.1, |_| true);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(1, 2));
        let mut grads = Gradients::zeros_like(&store);
        grads.accumulate(id, &Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
