//! Behavior state branch: `K` learnable mode tokens attend to the scene and
//! to each other, then decode coarse trajectory proposals.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, QueryMode};
use crate::encoder::{key_mask, SceneEncoding};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionBlock, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::scene::Point;
use crate::tensor::Tensor;

pub const TOKEN_INIT_STD: f64 = 0.02;

pub(crate) fn normal_tokens(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, TOKEN_INIT_STD).unwrap();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

#[derive(Clone, Debug)]
pub struct BehaviorBranch {
    pub tokens: ParamId,
    pub cross: Vec<AttentionBlock>,
    pub mode_self: Vec<AttentionBlock>,
    pub coarse_head: Mlp,
    pub num_modes: usize,
    pub future_len: usize,
    pub query_mode: QueryMode,
}

/// Outputs of the branch, all on the tape.
#[derive(Clone, Debug)]
pub struct BehaviorQueries {
    /// `K x C` mode queries after cross- and self-attention.
    pub mode_queries: Var,
    /// `K x 2T_f` (or `K x 2` in goal-only mode), row `k` = `[x0, y0, x1, ...]`.
    pub coarse: Var,
    /// `(T_f K) x (C + 2)` in time-major order (row `t * K + k`).
    pub queries_out: Var,
}

impl BehaviorBranch {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.hidden;
        let tokens = store.add("behavior.tokens", normal_tokens(rng, cfg.num_modes, c));
        let cross = (0..cfg.behavior_depth)
            .map(|d| {
                AttentionBlock::cross(store, rng, &format!("behavior.cross{d}"), c, c, cfg.num_heads, cfg.ff_hidden())
            })
            .collect();
        let mode_self = (0..cfg.behavior_depth)
            .map(|d| {
                AttentionBlock::self_attention(store, rng, &format!("behavior.self{d}"), c, cfg.num_heads, cfg.ff_hidden())
            })
            .collect();
        let out = match cfg.query_mode {
            QueryMode::FineGrained => 2 * cfg.future_len,
            QueryMode::GoalOnly => 2,
        };
        Self {
            tokens,
            cross,
            mode_self,
            coarse_head: Mlp::new(store, rng, "behavior.coarse", c, c, out),
            num_modes: cfg.num_modes,
            future_len: cfg.future_len,
            query_mode: cfg.query_mode,
        }
    }

    /// `Q_b[k] = target_enc + tokens[k]`.
    pub fn init_queries(&self, g: &mut Graph, target_enc: Var) -> Var {
        let tokens = g.param(self.tokens);
        g.add_row(tokens, target_enc)
    }

    /// Cross-attention over the full scene encoding, then self-attention
    /// across modes.
    pub fn attend(&self, g: &mut Graph, queries: Var, scene: &SceneEncoding) -> Var {
        let k = g.shape(queries).0;
        let scene_mask = key_mask(k, &scene.full_valid());
        let self_mask = vec![true; k * k];
        let mut q = queries;
        for (cross, mode_self) in self.cross.iter().zip(&self.mode_self) {
            q = cross.forward(g, q, Some(scene.full_enc), &scene_mask).0;
            q = mode_self.forward(g, q, None, &self_mask).0;
        }
        q
    }

    pub fn decode_coarse(&self, g: &mut Graph, mode_queries: Var) -> Var {
        let raw = self.coarse_head.forward(g, mode_queries);
        g.scale(raw, 1.0 / crate::encoder::COORD_SCALE)
    }

    /// Row `t * K + k` is `mode_queries[k] ⊕ coarse[t, k]`.
    pub fn assemble_output(&self, g: &mut Graph, mode_queries: Var, coarse: Var) -> Var {
        let (k, width) = g.shape(coarse);
        let t_f = self.future_len;
        let points = g.reshape(coarse, k * width / 2, 2);
        let mut q_idx = Vec::with_capacity(t_f * k);
        let mut p_idx = Vec::with_capacity(t_f * k);
        for t in 0..t_f {
            for m in 0..k {
                q_idx.push(m);
                p_idx.push(match self.query_mode {
                    QueryMode::FineGrained => m * t_f + t,
                    QueryMode::GoalOnly => m,
                });
            }
        }
        let q = g.gather(mode_queries, &q_idx);
        let p = g.gather(points, &p_idx);
        g.concat_cols(&[q, p])
    }

    pub fn forward(&self, g: &mut Graph, scene: &SceneEncoding) -> BehaviorQueries {
        let q = self.init_queries(g, scene.target_enc);
        let mode_queries = self.attend(g, q, scene);
        let coarse = self.decode_coarse(g, mode_queries);
        let queries_out = self.assemble_output(g, mode_queries, coarse);
        BehaviorQueries {
            mode_queries,
            coarse,
            queries_out,
        }
    }

    /// Winner-takes-all squared-L2 loss on the coarse proposals. In
    /// goal-only mode only the final point is supervised.
    pub fn loss(&self, g: &mut Graph, coarse: Var, gt: &[Point]) -> Var {
        match self.query_mode {
            QueryMode::FineGrained => wta_l2(g, coarse, gt),
            QueryMode::GoalOnly => wta_l2(g, coarse, &gt[gt.len() - 1..]),
        }
    }
}

/// `min_k mean_t ||coarse[k, t] - target[t]||^2` for `K x 2T` proposals.
pub fn wta_l2(g: &mut Graph, coarse: Var, targets: &[Point]) -> Var {
    let width = g.shape(coarse).1;
    assert_eq!(width, 2 * targets.len());
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let target_row = g.constant(Tensor::from_vec(1, width, flat));
    let neg = g.scale(target_row, -1.0);
    let diff = g.add_row(coarse, neg);
    let sq = g.square(diff);
    let per_mode = g.row_sum(sq);
    let per_mode = g.scale(per_mode, 1.0 / targets.len() as f64);
    let best = argmin(g.value(per_mode).data());
    g.gather(per_mode, &[best])
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}
