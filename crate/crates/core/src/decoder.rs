//! Two-stage decoder. Stage one rolls a recurrent cell over the fused
//! queries and emits Laplace trajectories with mode probabilities. Stage two
//! looks up the lanes nearest to each predicted point and adds a residual.

use rand_chacha::ChaCha8Rng;

use crate::behavior::normal_tokens;
use crate::config::{ModelConfig, ScaleRefinement};
use crate::encoder::COORD_SCALE;
use crate::graph::{Graph, Var};
use crate::nn::{AttentionBlock, CellKind, Mlp, Recurrent};
use crate::params::{ParamId, ParamStore};
use crate::scene::Point;
use crate::tensor::Tensor;

/// Added after the softplus so scales stay strictly positive.
pub const MIN_SCALE: f64 = 1e-3;

/// Prefix of every refinement parameter name.
pub const REFINE_PREFIX: &str = "refine.";

#[derive(Clone, Debug)]
pub struct Decoder {
    pub num_modes: usize,
    pub future_len: usize,
    /// Stand-in mode tokens when the behavior branch is disabled.
    pub mode_tokens: Option<ParamId>,
    pub traj_mlp: Mlp,
    pub cell: Recurrent,
    pub loc_head: Mlp,
    pub scale_head: Mlp,
    pub prob_head: Mlp,
    pub refiner: Option<Refiner>,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub nearest_n: usize,
    pub continuity: Option<(AttentionBlock, Recurrent)>,
    pub delta_head: Mlp,
    pub prob_head: Mlp,
    pub scale_head: Option<Mlp>,
}

/// Fused decoder input.
#[derive(Clone, Debug)]
pub struct FusedQueries {
    /// `(T_f K) x (2C + 2)`, row `t * K + k`.
    pub traj_input: Var,
    /// `(T_f K) x C`.
    pub traj_features: Var,
    /// `K x (2C + 2)`: the rows of `traj_input` at the last step.
    pub prob_input: Var,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    /// `(T_f K) x 2` locations in meters, row `t * K + k`.
    pub mu: Var,
    /// `(T_f K) x 2` Laplace scales.
    pub scale: Var,
    /// `1 x K` mode probabilities.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    /// `(T_f K) x C` future motion features.
    pub features: Var,
    pub out: StageOutput,
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    /// `(T_f K) x 2` residual added to the stage-one locations.
    pub delta: Var,
    pub out: StageOutput,
    /// Nearest segment indices per `(t, k)` row.
    pub nearest: Vec<Vec<usize>>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.hidden;
        let mode_tokens = (!cfg.use_behavior_branch)
            .then(|| store.add("decoder.mode_tokens", normal_tokens(rng, cfg.num_modes, c)));
        let fused = 2 * c + 2;
        let traj_mlp = Mlp::new(store, rng, "decoder.traj", fused, c, c);
        let cell = Recurrent::new(cfg.decoder_cell, store, rng, "decoder.cell", c, c);
        let loc_head = Mlp::new(store, rng, "decoder.loc", c, c, 2);
        let scale_head = Mlp::new(store, rng, "decoder.scale", c, c, 2);
        let prob_head = Mlp::new(store, rng, "decoder.prob", fused, c, 1);
        let refiner = cfg.use_refinement.then(|| {
            let continuity = cfg.use_lane_continuity.then(|| {
                (
                    AttentionBlock::cross(store, rng, "refine.lane_attn", c, c, cfg.num_heads, cfg.ff_hidden()),
                    Recurrent::new(CellKind::Gru, store, rng, "refine.continuity", c, c),
                )
            });
            let width = if cfg.use_lane_continuity { 2 * c + 2 } else { c + 2 };
            let delta_head = Mlp::new(store, rng, "refine.delta", width, c, 2);
            // Start as the identity map.
            store.get_mut(delta_head.second.weight).scale_assign(0.0);
            store.get_mut(delta_head.second.bias).scale_assign(0.0);
            Refiner {
                nearest_n: cfg.nearest_n,
                continuity,
                delta_head,
                prob_head: Mlp::new(store, rng, "refine.prob", width, c, 1),
                scale_head: (cfg.scale_refinement == ScaleRefinement::Reestimate)
                    .then(|| Mlp::new(store, rng, "refine.scale", width, c, 2)),
            }
        });
        Self {
            num_modes: cfg.num_modes,
            future_len: cfg.future_len,
            mode_tokens,
            traj_mlp,
            cell,
            loc_head,
            scale_head,
            prob_head,
            refiner,
        }
    }

    /// Pairs lane query `t` with behavior query `(t, k)` for every row.
    ///
    /// `lane` is `T_f x C`; `None` broadcasts the target encoding instead.
    /// `behavior` is `(T_f K) x (C + 2)`; `None` uses the decoder's own mode
    /// tokens with zero proposal points.
    pub fn fuse_queries(
        &self,
        g: &mut Graph,
        target_enc: Var,
        lane: Option<Var>,
        behavior: Option<Var>,
    ) -> FusedQueries {
        let k = self.num_modes;
        let t_f = self.future_len;
        let step_idx: Vec<usize> = (0..t_f * k).map(|r| r / k).collect();
        let lane_rows = match lane {
            Some(l) => g.gather(l, &step_idx),
            None => g.gather(target_enc, &vec![0; t_f * k]),
        };
        let behavior_rows = match behavior {
            Some(b) => b,
            None => {
                let tokens = g.param(self.mode_tokens.expect("mode tokens exist without behavior branch"));
                let q = g.add_row(tokens, target_enc);
                let mode_idx: Vec<usize> = (0..t_f * k).map(|r| r % k).collect();
                let q = g.gather(q, &mode_idx);
                let zeros = g.constant(Tensor::zeros(t_f * k, 2));
                g.concat_cols(&[q, zeros])
            }
        };
        let traj_input = g.concat_cols(&[lane_rows, behavior_rows]);
        let traj_features = self.traj_mlp.forward(g, traj_input);
        let prob_input = g.slice_rows(traj_input, (t_f - 1) * k, t_f * k);
        FusedQueries {
            traj_input,
            traj_features,
            prob_input,
        }
    }

    pub fn decode_stage1(&self, g: &mut Graph, target_enc: Var, fused: &FusedQueries) -> Stage1 {
        let k = self.num_modes;
        let h0 = g.gather(target_enc, &vec![0; k]);
        let steps = self.cell.run(g, fused.traj_features, k, self.future_len, h0, None);
        let features = g.concat_rows(&steps);
        let raw = self.loc_head.forward(g, features);
        let mu = g.scale(raw, 1.0 / COORD_SCALE);
        let scale = positive_scale(g, &self.scale_head, features);
        let logits = self.prob_head.forward(g, fused.prob_input);
        let logits = g.reshape(logits, 1, k);
        let probs = g.softmax(logits, None);
        Stage1 {
            features,
            out: StageOutput { mu, scale, probs },
        }
    }

    /// `F_b = F_fut ⊕ Ŷ_μ`.
    pub fn build_future_motion(&self, g: &mut Graph, features: Var, mu: Var) -> Var {
        g.concat_cols(&[features, mu])
    }

    /// Each `(t, k)` feature row attends to the `N` valid segments whose
    /// centers are nearest its predicted point.
    pub fn nearest_lane_features(
        &self,
        g: &mut Graph,
        features: Var,
        mu: &Tensor,
        map_enc: Var,
        centers: &[Option<Point>],
    ) -> Option<(Var, Vec<Vec<usize>>)> {
        let refiner = self.refiner.as_ref()?;
        let (attn, _) = refiner.continuity.as_ref()?;
        let rows = mu.rows();
        let nearest: Vec<Vec<usize>> = (0..rows)
            .map(|r| nearest_segments([mu.get(r, 0), mu.get(r, 1)], centers, refiner.nearest_n))
            .collect();
        let idx: Vec<usize> = nearest.iter().flatten().copied().collect();
        let mut allow = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            for (owner, chosen) in nearest.iter().enumerate() {
                allow.extend(std::iter::repeat_n(owner == r, chosen.len()));
            }
        }
        let context = g.gather(map_enc, &idx);
        let (lane, _) = attn.forward(g, features, Some(context), &allow);
        Some((lane, nearest))
    }

    /// Runs a GRU along the horizon for each mode, starting from zeros.
    pub fn encode_lane_continuity(&self, g: &mut Graph, lane: Var) -> Var {
        let (_, cell) = self
            .refiner
            .as_ref()
            .and_then(|r| r.continuity.as_ref())
            .expect("continuity encoder exists");
        let k = self.num_modes;
        let h0 = g.constant(Tensor::zeros(k, cell.hidden()));
        let steps = cell.run(g, lane, k, self.future_len, h0, None);
        g.concat_rows(&steps)
    }

    pub fn refine(
        &self,
        g: &mut Graph,
        stage1: &Stage1,
        map_enc: Var,
        centers: &[Option<Point>],
    ) -> Option<Stage2> {
        let refiner = self.refiner.as_ref()?;
        let k = self.num_modes;
        let t_f = self.future_len;
        let motion = self.build_future_motion(g, stage1.features, stage1.out.mu);
        let mu_value = g.value(stage1.out.mu).clone();
        let (input, nearest) =
            match self.nearest_lane_features(g, stage1.features, &mu_value, map_enc, centers) {
                Some((lane, nearest)) => {
                    let cont = self.encode_lane_continuity(g, lane);
                    (g.concat_cols(&[motion, cont]), nearest)
                }
                None => (motion, Vec::new()),
            };
        let delta = refiner.delta_head.forward(g, input);
        let mu = g.add(stage1.out.mu, delta);
        let last = g.slice_rows(input, (t_f - 1) * k, t_f * k);
        let logits = refiner.prob_head.forward(g, last);
        let logits = g.reshape(logits, 1, k);
        let probs = g.softmax(logits, None);
        let scale = match &refiner.scale_head {
            Some(head) => positive_scale(g, head, input),
            None => stage1.out.scale,
        };
        Some(Stage2 {
            delta,
            out: StageOutput { mu, scale, probs },
            nearest,
        })
    }
}

fn positive_scale(g: &mut Graph, head: &Mlp, x: Var) -> Var {
    let raw = head.forward(g, x);
    let s = g.softplus(raw);
    g.offset(s, MIN_SCALE)
}

/// Indices of the `n` valid segment centers closest to `p`, nearest first,
/// ties to the lowest index.
pub fn nearest_segments(p: Point, centers: &[Option<Point>], n: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2), i)))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(n).map(|(_, i)| i).collect()
}
