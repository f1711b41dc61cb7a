//! Lane state branch: per-timestep lane queries score every lane segment,
//! keep the best `M`, and aggregate them with masked cross-attention.

use rand_chacha::ChaCha8Rng;

use crate::behavior::normal_tokens;
use crate::config::{ModelConfig, QueryMode};
use crate::encoder::{key_mask, SceneEncoding};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionBlock, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct LaneBranch {
    pub tokens: ParamId,
    pub cross: AttentionBlock,
    pub gate: Linear,
    pub value: Linear,
    pub score_head: Mlp,
    pub aggregate: AttentionBlock,
    pub top_m: usize,
    pub future_len: usize,
    pub query_mode: QueryMode,
}

#[derive(Clone, Debug)]
pub struct LaneQueries {
    /// `T_q x C` lane queries after attending to the scene.
    pub queries: Var,
    /// `T_q x N_m` softmax scores; masked segments are exactly zero.
    pub scores: Var,
    /// Chosen segment indices per lane query, best first.
    pub selection: Vec<Vec<usize>>,
    /// `T_q x C` lane-aware queries.
    pub aggregated: Var,
    /// `T_f x C`, equal to `aggregated` or its single row broadcast.
    pub per_step: Var,
    /// Attention node of the aggregation block.
    pub aggregate_attention: Var,
}

impl LaneBranch {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.hidden;
        let ff = cfg.ff_hidden();
        Self {
            tokens: store.add("lane.tokens", normal_tokens(rng, cfg.lane_queries(), c)),
            cross: AttentionBlock::cross(store, rng, "lane.cross", c, c, cfg.num_heads, ff),
            gate: Linear::new(store, rng, "lane.gate", 2 * c, c),
            value: Linear::new(store, rng, "lane.value", c, c),
            score_head: Mlp::new(store, rng, "lane.score", 3 * c, c, 1),
            aggregate: AttentionBlock::cross(store, rng, "lane.aggregate", c, c + 1, cfg.num_heads, ff),
            top_m: cfg.top_m,
            future_len: cfg.future_len,
            query_mode: cfg.query_mode,
        }
    }

    /// `Q_L[t] = target_enc + tokens[t]`.
    pub fn init_queries(&self, g: &mut Graph, target_enc: Var) -> Var {
        let tokens = g.param(self.tokens);
        g.add_row(tokens, target_enc)
    }

    pub fn attend(&self, g: &mut Graph, queries: Var, scene: &SceneEncoding) -> Var {
        let t_q = g.shape(queries).0;
        let mask = key_mask(t_q, &scene.full_valid());
        self.cross.forward(g, queries, Some(scene.full_enc), &mask).0
    }

    /// Gated interaction between every lane query and every segment, an MLP
    /// logit per pair, and a softmax over valid segments. Returns `T_q x N_m`.
    pub fn score(&self, g: &mut Graph, queries: Var, map_enc: Var, segment_valid: &[bool]) -> Var {
        let t_q = g.shape(queries).0;
        let n_m = segment_valid.len();
        let mut q_idx = Vec::with_capacity(t_q * n_m);
        let mut m_idx = Vec::with_capacity(t_q * n_m);
        for t in 0..t_q {
            for m in 0..n_m {
                q_idx.push(t);
                m_idx.push(m);
            }
        }
        let q_pairs = g.gather(queries, &q_idx);
        let m_pairs = g.gather(map_enc, &m_idx);
        let gate_in = g.concat_cols(&[m_pairs, q_pairs]);
        let gate = self.gate.forward(g, gate_in);
        let gate = g.sigmoid(gate);
        let values = self.value.forward(g, queries);
        let values = g.gather(values, &q_idx);
        let interaction = g.mul(gate, values);
        let features = g.concat_cols(&[interaction, m_pairs, q_pairs]);
        let logits = self.score_head.forward(g, features);
        let logits = g.reshape(logits, t_q, n_m);
        let allow = key_mask(t_q, segment_valid);
        g.softmax(logits, Some(&allow))
    }

    /// Builds `[E_M[idx] ⊕ score]` rows for the selected segments and lets
    /// each lane query attend only to its own selection.
    pub fn aggregate_selected(
        &self,
        g: &mut Graph,
        queries: Var,
        map_enc: Var,
        scores: Var,
        selection: &[Vec<usize>],
    ) -> (Var, Var) {
        let t_q = selection.len();
        let n_m = g.shape(scores).1;
        let mut seg_idx = Vec::new();
        let mut score_idx = Vec::new();
        let mut owner = Vec::new();
        for (t, chosen) in selection.iter().enumerate() {
            for &m in chosen {
                seg_idx.push(m);
                score_idx.push(t * n_m + m);
                owner.push(t);
            }
        }
        let flat = g.reshape(scores, t_q * n_m, 1);
        let s = g.gather(flat, &score_idx);
        let e = g.gather(map_enc, &seg_idx);
        let context = g.concat_cols(&[e, s]);
        let mut allow = Vec::with_capacity(t_q * owner.len());
        for t in 0..t_q {
            allow.extend(owner.iter().map(|&o| o == t));
        }
        self.aggregate.forward(g, queries, Some(context), &allow)
    }

    pub fn forward(&self, g: &mut Graph, scene: &SceneEncoding) -> LaneQueries {
        let q = self.init_queries(g, scene.target_enc);
        let queries = self.attend(g, q, scene);
        let scores = self.score(g, queries, scene.map_enc, &scene.segment_valid);
        let t_q = g.shape(scores).0;
        let n_m = scene.segment_valid.len();
        let values = g.value(scores).data();
        let selection: Vec<Vec<usize>> = (0..t_q)
            .map(|t| select_top_m(&values[t * n_m..(t + 1) * n_m], &scene.segment_valid, self.top_m))
            .collect();
        let (aggregated, aggregate_attention) =
            self.aggregate_selected(g, queries, scene.map_enc, scores, &selection);
        let per_step = if t_q == self.future_len {
            aggregated
        } else {
            g.gather(aggregated, &vec![0; self.future_len])
        };
        LaneQueries {
            queries,
            scores,
            selection,
            aggregated,
            per_step,
            aggregate_attention,
        }
    }

    /// Lane labels the branch is supervised with: one per step, or only the
    /// final one in goal-only mode.
    pub fn supervised_labels(&self, labels: &[usize]) -> Vec<usize> {
        match self.query_mode {
            QueryMode::FineGrained => labels.to_vec(),
            QueryMode::GoalOnly => vec![*labels.last().unwrap()],
        }
    }

    /// Binary cross-entropy of every (query, valid segment) score against
    /// the one-hot label, summed.
    pub fn loss(&self, g: &mut Graph, scores: Var, labels: &[usize], segment_valid: &[bool]) -> Var {
        let labels = self.supervised_labels(labels);
        lane_bce(g, scores, &labels, segment_valid)
    }
}

pub fn lane_bce(g: &mut Graph, scores: Var, labels: &[usize], segment_valid: &[bool]) -> Var {
    let (t_q, n_m) = g.shape(scores);
    assert_eq!(labels.len(), t_q, "one label per lane query");
    let mut y = Tensor::zeros(t_q, n_m);
    let mut valid = Tensor::zeros(t_q, n_m);
    for t in 0..t_q {
        y.set(t, labels[t], 1.0);
        for m in 0..n_m {
            if segment_valid[m] {
                valid.set(t, m, 1.0);
            }
        }
    }
    let not_y = y.map(|v| 1.0 - v);
    let y = g.constant(y);
    let not_y = g.constant(not_y);
    let valid = g.constant(valid);
    let p = g.clamp(scores, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = g.ln(p);
    let q = g.scale(p, -1.0);
    let q = g.offset(q, 1.0);
    let log_q = g.ln(q);
    let pos = g.mul(y, log_p);
    let neg = g.mul(not_y, log_q);
    let total = g.add(pos, neg);
    let total = g.mul(total, valid);
    let s = g.sum(total);
    g.scale(s, -1.0)
}

/// Indices of the `m` highest-scoring valid segments, best first. Ties go to
/// the lowest index. Fewer than `m` are returned if fewer are valid.
pub fn select_top_m(scores: &[f64], valid: &[bool], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| valid[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_m_breaks_ties_by_index_and_skips_masked() {
        let s = [0.2, 0.5, 0.5, 0.9, 0.1];
        let v = [true, true, true, false, true];
        assert_eq!(select_top_m(&s, &v, 2), vec![1, 2]);
        assert_eq!(select_top_m(&s, &v, 9), vec![1, 2, 0, 4]);
    }

    #[test]
    fn bce_of_uniform_pair() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::from_vec(1, 2, vec![0.5, 0.5]));
        let l = lane_bce(&mut g, s, &[0], &[true, true]);
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }
}
