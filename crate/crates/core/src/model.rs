//! The assembled predictor: encoder, optional branches, two-stage decoder,
//! and the training losses built on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorBranch, BehaviorQueries};
use crate::config::{ConfigError, ModelConfig};
use crate::decoder::{Decoder, FusedQueries, Stage1, Stage2, StageOutput};
use crate::encoder::{Encoder, SceneEncoding};
use crate::graph::{Graph, Var};
use crate::lane::{LaneBranch, LaneQueries};
use crate::objectives::{self, LossComponents, LossWeights, Stage, ANGLE_EPS, PROB_EPS};
use crate::params::ParamStore;
use crate::scene::{Point, Scene};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scene does not fit the model: {0}")]
    SceneMismatch(String),
    #[error("no scenes to evaluate")]
    NoScenes,
}

#[derive(Clone, Debug)]
pub struct Blnet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub behavior: Option<BehaviorBranch>,
    pub lane: Option<LaneBranch>,
    pub decoder: Decoder,
}

/// Everything one forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub encoding: SceneEncoding,
    pub behavior: Option<BehaviorQueries>,
    pub lane: Option<LaneQueries>,
    pub fused: FusedQueries,
    pub stage1: Stage1,
    pub stage2: Option<Stage2>,
}

impl ForwardPass {
    /// Output of the last stage that ran.
    pub fn output(&self) -> &StageOutput {
        match &self.stage2 {
            Some(s) => &s.out,
            None => &self.stage1.out,
        }
    }
}

/// Loss of one stage: the weighted total on the tape and each component.
#[derive(Clone, Debug)]
pub struct StageLoss {
    pub total: Var,
    pub components: LossComponents,
    pub terms: Vec<(&'static str, Var)>,
}

impl Blnet {
    /// Registers every enabled parameter in `store`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let encoder = Encoder::new(&config, store, rng);
        let behavior = config
            .use_behavior_branch
            .then(|| BehaviorBranch::new(&config, store, rng));
        let lane = config.use_lane_branch.then(|| LaneBranch::new(&config, store, rng));
        let decoder = Decoder::new(&config, store, rng);
        Ok(Self {
            config,
            encoder,
            behavior,
            lane,
            decoder,
        })
    }

    pub fn check_scene(&self, scene: &Scene) -> Result<(), ModelError> {
        let c = &self.config;
        let mismatch = |m: String| Err(ModelError::SceneMismatch(m));
        if scene.meta.future_len != c.future_len {
            return mismatch(format!(
                "future length {} but the model predicts {}",
                scene.meta.future_len, c.future_len
            ));
        }
        if scene.lane_attr_dim() != c.lane_attr_dim || scene.agent_attr_dim() != c.agent_attr_dim {
            return mismatch("attribute widths differ from the model".into());
        }
        if scene.target_index().is_none() {
            return mismatch("scene has no target agent".into());
        }
        if !scene.segment_valid().iter().any(|&v| v) {
            return mismatch("scene has no valid lane segment".into());
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, scene: &Scene, refine: bool) -> ForwardPass {
        let encoding = self.encoder.encode(g, scene);
        let behavior = self.behavior.as_ref().map(|b| b.forward(g, &encoding));
        let lane = self.lane.as_ref().map(|l| l.forward(g, &encoding));
        let fused = self.decoder.fuse_queries(
            g,
            encoding.target_enc,
            lane.as_ref().map(|l| l.per_step),
            behavior.as_ref().map(|b| b.queries_out),
        );
        let stage1 = self.decoder.decode_stage1(g, encoding.target_enc, &fused);
        let stage2 = if refine {
            self.decoder
                .refine(g, &stage1, encoding.map_enc, &scene.segment_centers())
        } else {
            None
        };
        ForwardPass {
            encoding,
            behavior,
            lane,
            fused,
            stage1,
            stage2,
        }
    }

    /// Regression, classification and branch losses on one stage output.
    fn base_terms(&self, g: &mut Graph, pass: &ForwardPass, out: &StageOutput, scene: &Scene, targets: &LossTargets) -> Vec<(&'static str, Var)> {
        let gt = &scene.ground_truth;
        let k = self.config.num_modes;
        let mut terms = vec![
            ("reg", regression_term(g, out, targets.best, k, &gt.positions)),
            ("cls", classification_term(g, out.probs, &targets.soft)),
        ];
        if let (Some(branch), Some(lq)) = (&self.lane, &pass.lane) {
            let l = branch.loss(g, lq.scores, &gt.lane_labels, &pass.encoding.segment_valid);
            terms.push(("lane", l));
        }
        if let (Some(branch), Some(bq)) = (&self.behavior, &pass.behavior) {
            terms.push(("behavior", branch.loss(g, bq.coarse, &gt.positions)));
        }
        terms
    }

    /// The quantities the losses treat as labels: the ADE-best mode of the
    /// trained output, the soft classification targets and, for stage two,
    /// the stage-one trajectory of that mode. `None` for stage two without
    /// refinement.
    pub fn loss_targets(&self, g: &Graph, pass: &ForwardPass, scene: &Scene, w: &LossWeights, stage: Stage) -> Option<LossTargets> {
        let (k, t_f) = (self.config.num_modes, self.config.future_len);
        let gt = &scene.ground_truth.positions;
        let out = match stage {
            Stage::One => &pass.stage1.out,
            Stage::Two => &pass.stage2.as_ref()?.out,
        };
        let mu = modes_from_rows(g.value(out.mu), k, t_f);
        let best = objectives::best_mode(&mu, gt);
        let stage1_best = (stage == Stage::Two).then(|| modes_from_rows(g.value(pass.stage1.out.mu), k, t_f).swap_remove(best));
        Some(LossTargets {
            best,
            soft: objectives::soft_targets(&mu, gt, w.tau),
            stage1_best,
        })
    }

    /// Stage-one objective: regression, classification, and the branch
    /// losses of whichever branches exist.
    pub fn stage1_loss(&self, g: &mut Graph, pass: &ForwardPass, scene: &Scene, w: &LossWeights) -> StageLoss {
        self.loss(g, pass, scene, w, Stage::One).expect("stage one always has a loss")
    }

    /// Stage-two objective: the stage-one terms evaluated on the refined
    /// output plus the deviation and angle terms. `None` without refinement.
    pub fn stage2_loss(&self, g: &mut Graph, pass: &ForwardPass, scene: &Scene, w: &LossWeights) -> Option<StageLoss> {
        self.loss(g, pass, scene, w, Stage::Two)
    }

    pub fn loss(&self, g: &mut Graph, pass: &ForwardPass, scene: &Scene, w: &LossWeights, stage: Stage) -> Option<StageLoss> {
        let targets = self.loss_targets(g, pass, scene, w, stage)?;
        self.loss_with_targets(g, pass, scene, w, stage, &targets)
    }

    /// The stage loss with labels fixed in advance, so that it is a smooth
    /// function of the parameters.
    pub fn loss_with_targets(
        &self,
        g: &mut Graph,
        pass: &ForwardPass,
        scene: &Scene,
        w: &LossWeights,
        stage: Stage,
        targets: &LossTargets,
    ) -> Option<StageLoss> {
        let gt = &scene.ground_truth;
        let k = self.config.num_modes;
        match stage {
            Stage::One => {
                let terms = self.base_terms(g, pass, &pass.stage1.out, scene, targets);
                Some(combine(g, terms, w))
            }
            Stage::Two => {
                let s2 = pass.stage2.as_ref()?;
                let mut terms = self.base_terms(g, pass, &s2.out, scene, targets);
                let stage1 = targets.stage1_best.as_ref()?;
                terms.push((
                    "deviation",
                    deviation_term(g, s2.delta, targets.best, k, stage1, &gt.positions),
                ));
                terms.push(("angle", angle_term(g, s2.out.mu, targets.best, k, &gt.headings)));
                Some(combine(g, terms, w))
            }
        }
    }
}

/// Labels derived from a forward pass; see [`Blnet::loss_targets`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub best: usize,
    pub soft: Vec<f64>,
    pub stage1_best: Option<Vec<Point>>,
}

fn combine(g: &mut Graph, terms: Vec<(&'static str, Var)>, w: &LossWeights) -> StageLoss {
    let mut comps = LossComponents::default();
    let mut weighted = Vec::with_capacity(terms.len());
    for &(name, v) in &terms {
        let value = g.value(v).item();
        let weight = match name {
            "reg" => {
                comps.reg = value;
                1.0
            }
            "cls" => {
                comps.cls = value;
                1.0
            }
            "lane" => {
                comps.lane = Some(value);
                w.lane
            }
            "behavior" => {
                comps.behavior = Some(value);
                w.behavior
            }
            "deviation" => {
                comps.deviation = Some(value);
                w.deviation
            }
            "angle" => {
                comps.angle = Some(value);
                w.angle
            }
            other => unreachable!("unknown loss term {other}"),
        };
        weighted.push(if weight == 1.0 { v } else { g.scale(v, weight) });
    }
    let mut total = weighted[0];
    for &v in &weighted[1..] {
        total = g.add(total, v);
    }
    StageLoss {
        total,
        components: comps,
        terms,
    }
}

fn mode_rows(mode: usize, k: usize, t_f: usize) -> Vec<usize> {
    (0..t_f).map(|t| t * k + mode).collect()
}

fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::from_vec(points.len(), 2, points.iter().flatten().copied().collect())
}

pub fn regression_term(g: &mut Graph, out: &StageOutput, best: usize, k: usize, gt: &[Point]) -> Var {
    let rows = mode_rows(best, k, gt.len());
    let mu = g.gather(out.mu, &rows);
    let s = g.gather(out.scale, &rows);
    let y = g.constant(points_tensor(gt));
    let two_s = g.scale(s, 2.0);
    let log_term = g.ln(two_s);
    let err = g.sub(y, mu);
    let err = g.abs(err);
    let err = g.div(err, s);
    let nll = g.add(log_term, err);
    let total = g.sum(nll);
    g.scale(total, 1.0 / gt.len() as f64)
}

pub fn classification_term(g: &mut Graph, probs: Var, targets: &[f64]) -> Var {
    let t = g.constant(Tensor::from_vec(1, targets.len(), targets.to_vec()));
    let p = g.clamp(probs, PROB_EPS, 1.0);
    let lp = g.ln(p);
    let prod = g.mul(t, lp);
    let s = g.sum(prod);
    g.scale(s, -1.0)
}

pub fn deviation_term(g: &mut Graph, delta: Var, best: usize, k: usize, stage1: &[Point], gt: &[Point]) -> Var {
    let rows = mode_rows(best, k, gt.len());
    let d = g.gather(delta, &rows);
    let target: Vec<Point> = gt
        .iter()
        .zip(stage1)
        .map(|(y, s)| [y[0] - s[0], y[1] - s[1]])
        .collect();
    let target = g.constant(points_tensor(&target));
    let diff = g.sub(d, target);
    let sq = g.square(diff);
    let s = g.sum(sq);
    g.scale(s, 1.0 / gt.len() as f64)
}

pub fn angle_term(g: &mut Graph, mu: Var, best: usize, k: usize, headings: &[f64]) -> Var {
    let t_f = headings.len();
    let p = g.gather(mu, &mode_rows(best, k, t_f));
    let origin = g.constant(Tensor::zeros(1, 2));
    let prev = if t_f > 1 {
        let head = g.slice_rows(p, 0, t_f - 1);
        g.concat_rows(&[origin, head])
    } else {
        origin
    };
    let d = g.sub(p, prev);
    let u: Vec<Point> = headings.iter().map(|h| [h.cos(), h.sin()]).collect();
    let u = g.constant(points_tensor(&u));
    let dot = g.mul(d, u);
    let dot = g.row_sum(dot);
    let sq = g.square(d);
    let norm = g.row_sum(sq);
    let norm = g.offset(norm, ANGLE_EPS);
    let norm = g.sqrt(norm);
    let cos = g.div(dot, norm);
    let s = g.sum(cos);
    g.scale(s, -1.0 / t_f as f64)
}

/// Converts a `(T_f K) x 2` time-major tensor into `[mode][step]` points.
pub fn modes_from_rows(t: &Tensor, k: usize, t_f: usize) -> Vec<Vec<Point>> {
    assert_eq!(t.rows(), k * t_f);
    (0..k)
        .map(|m| (0..t_f).map(|s| [t.get(s * k + m, 0), t.get(s * k + m, 1)]).collect())
        .collect()
}

/// Model configuration together with trained weights.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub model: Blnet,
    pub store: ParamStore,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Blnet::new(config, &mut store, &mut rng)?;
        Ok(Self { model, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

/// One predicted mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub probability: f64,
    pub positions: Vec<Point>,
    pub scales: Vec<Point>,
    pub headings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub refined: bool,
    pub modes: Vec<ModePrediction>,
    /// Stage-one locations, present when refinement ran.
    pub stage1_positions: Option<Vec<Vec<Point>>>,
    /// Refinement residuals, present when refinement ran.
    pub deltas: Option<Vec<Vec<Point>>>,
    /// Lane scores per lane query over all segments.
    pub lane_scores: Option<Vec<Vec<f64>>>,
}

impl Prediction {
    pub fn positions(&self) -> Vec<Vec<Point>> {
        self.modes.iter().map(|m| m.positions.clone()).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.probability).collect()
    }
}

/// Reads the final-stage output of a finished forward pass.
pub fn extract_prediction(g: &Graph, pass: &ForwardPass, k: usize, t_f: usize) -> Prediction {
    let out = pass.output();
    let mu = modes_from_rows(g.value(out.mu), k, t_f);
    let scale = modes_from_rows(g.value(out.scale), k, t_f);
    let probs = g.value(out.probs).data().to_vec();
    let modes = mu
        .into_iter()
        .zip(scale)
        .zip(probs)
        .map(|((positions, scales), probability)| ModePrediction {
            probability,
            headings: objectives::displacement_headings(&positions),
            positions,
            scales,
        })
        .collect();
    let stage1_positions = pass
        .stage2
        .as_ref()
        .map(|_| modes_from_rows(g.value(pass.stage1.out.mu), k, t_f));
    let deltas = pass
        .stage2
        .as_ref()
        .map(|s| modes_from_rows(g.value(s.delta), k, t_f));
    let lane_scores = pass.lane.as_ref().map(|l| {
        let s = g.value(l.scores);
        (0..s.rows()).map(|r| s.row(r).to_vec()).collect()
    });
    Prediction {
        refined: pass.stage2.is_some(),
        modes,
        stage1_positions,
        deltas,
        lane_scores,
    }
}

/// Deterministic inference on one scene.
pub fn predict(params: &ModelParams, scene: &Scene, refine: bool) -> Result<Prediction, ModelError> {
    params.model.check_scene(scene)?;
    let mut g = Graph::new(&params.store);
    let pass = params.model.forward(&mut g, scene, refine);
    let c = params.config();
    Ok(extract_prediction(&g, &pass, c.num_modes, c.future_len))
}
