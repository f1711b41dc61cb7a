//! Scene encoder: per-element embedding, recurrent aggregation, then
//! agent-to-lane and lane-to-agent cross-attention.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, Var};
use crate::nn::{AttentionBlock, CellKind, Linear, Recurrent};
use crate::params::ParamStore;
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Input coordinates are fed to the network in units of 10 m.
pub const COORD_SCALE: f64 = 0.1;

/// Two stacked two-layer perceptrons, `in -> C -> C` each.
#[derive(Clone, Debug)]
pub struct PointEmbedding {
    layers: [Linear; 4],
}

impl PointEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            layers: [
                Linear::new(store, rng, &format!("{name}.0.0"), input, hidden),
                Linear::new(store, rng, &format!("{name}.0.1"), hidden, hidden),
                Linear::new(store, rng, &format!("{name}.1.0"), hidden, hidden),
                Linear::new(store, rng, &format!("{name}.1.1"), hidden, hidden),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h);
            h = g.gelu(h);
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct FusionRound {
    pub lanes_from_agents: AttentionBlock,
    pub agents_from_lanes: AttentionBlock,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub hidden: usize,
    pub lane_embed: PointEmbedding,
    pub lane_gru: Recurrent,
    pub agent_embed: PointEmbedding,
    pub agent_gru: Recurrent,
    pub rounds: Vec<FusionRound>,
}

/// Encoded scene. Rows of masked segments/agents are exactly zero.
#[derive(Clone, Debug)]
pub struct SceneEncoding {
    /// `N_m x C` interactive map encoding.
    pub map_enc: Var,
    /// `N_v x C` interactive agent encoding.
    pub agent_enc: Var,
    /// `1 x C` row of `agent_enc` for the target.
    pub target_enc: Var,
    /// `(N_m + N_v) x C`: map rows then agent rows.
    pub full_enc: Var,
    pub segment_valid: Vec<bool>,
    pub agent_valid: Vec<bool>,
    pub target_index: usize,
    /// Attention nodes of the fusion rounds.
    pub attention: Vec<Var>,
}

impl SceneEncoding {
    pub fn full_valid(&self) -> Vec<bool> {
        self.segment_valid
            .iter()
            .chain(&self.agent_valid)
            .copied()
            .collect()
    }
}

/// Row-major `rows x cols` permission mask from per-key validity.
pub fn key_mask(rows: usize, key_valid: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * key_valid.len());
    for _ in 0..rows {
        m.extend_from_slice(key_valid);
    }
    m
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.hidden;
        let rounds = (0..cfg.fusion_rounds)
            .map(|r| FusionRound {
                lanes_from_agents: AttentionBlock::cross(
                    store,
                    rng,
                    &format!("encoder.fusion{r}.a2l"),
                    c,
                    c,
                    cfg.num_heads,
                    cfg.ff_hidden(),
                ),
                agents_from_lanes: AttentionBlock::cross(
                    store,
                    rng,
                    &format!("encoder.fusion{r}.l2a"),
                    c,
                    c,
                    cfg.num_heads,
                    cfg.ff_hidden(),
                ),
            })
            .collect();
        Self {
            hidden: c,
            lane_embed: PointEmbedding::new(store, rng, "encoder.lane_embed", 6 + cfg.lane_attr_dim, c),
            lane_gru: Recurrent::new(CellKind::Gru, store, rng, "encoder.lane_gru", c, c),
            agent_embed: PointEmbedding::new(store, rng, "encoder.agent_embed", 4 + cfg.agent_attr_dim, c),
            agent_gru: Recurrent::new(CellKind::Gru, store, rng, "encoder.agent_gru", c, c),
            rounds,
        }
    }

    /// Embeds every lane vector and agent step and aggregates each element
    /// with a GRU over its steps. Returns `(E_M, E_H)`.
    pub fn embed_and_aggregate(&self, g: &mut Graph, scene: &Scene) -> (Var, Var) {
        let (lane_x, lane_valid) = lane_features(scene);
        let n_m = scene.segments.len();
        let s = scene.meta.vectors_per_segment;
        let x = g.constant(lane_x);
        let emb = self.lane_embed.forward(g, x);
        let h0 = g.constant(Tensor::zeros(n_m, self.hidden));
        let outs = self.lane_gru.run(g, emb, n_m, s, h0, Some(&lane_valid));
        let e_m = *outs.last().unwrap();

        let (agent_x, agent_valid) = agent_features(scene);
        let n_v = scene.agents.len();
        let t_h = scene.meta.history_len;
        let x = g.constant(agent_x);
        let emb = self.agent_embed.forward(g, x);
        let h0 = g.constant(Tensor::zeros(n_v, self.hidden));
        let outs = self.agent_gru.run(g, emb, n_v, t_h, h0, Some(&agent_valid));
        let e_h = *outs.last().unwrap();
        (e_m, e_h)
    }

    /// Agent-to-lane attention (map rows as queries) followed by
    /// lane-to-agent attention over the fused map rows, repeated per round.
    pub fn fuse(
        &self,
        g: &mut Graph,
        e_m: Var,
        e_h: Var,
        segment_valid: &[bool],
        agent_valid: &[bool],
        target_index: usize,
    ) -> SceneEncoding {
        let n_m = segment_valid.len();
        let n_v = agent_valid.len();
        let mut map = g.mask_rows(e_m, segment_valid);
        let mut agents = g.mask_rows(e_h, agent_valid);
        let mut attention = Vec::new();
        for round in &self.rounds {
            let (m, a1) = round.lanes_from_agents.forward(
                g,
                map,
                Some(agents),
                &key_mask(n_m, agent_valid),
            );
            map = g.mask_rows(m, segment_valid);
            let (h, a2) = round.agents_from_lanes.forward(
                g,
                agents,
                Some(map),
                &key_mask(n_v, segment_valid),
            );
            agents = g.mask_rows(h, agent_valid);
            attention.push(a1);
            attention.push(a2);
        }
        let target_enc = g.gather(agents, &[target_index]);
        let full_enc = g.concat_rows(&[map, agents]);
        SceneEncoding {
            map_enc: map,
            agent_enc: agents,
            target_enc,
            full_enc,
            segment_valid: segment_valid.to_vec(),
            agent_valid: agent_valid.to_vec(),
            target_index,
            attention,
        }
    }

    pub fn encode(&self, g: &mut Graph, scene: &Scene) -> SceneEncoding {
        let (e_m, e_h) = self.embed_and_aggregate(g, scene);
        let target = scene.target_index().expect("validated scene has a target");
        self.fuse(
            g,
            e_m,
            e_h,
            &scene.segment_valid(),
            &scene.agent_valid(),
            target,
        )
    }
}

/// Lane vector features in step-major order (row `s * N_m + m`) with their
/// validity mask. Masked entries are zero rows.
pub fn lane_features(scene: &Scene) -> (Tensor, Vec<bool>) {
    let n_m = scene.segments.len();
    let s_len = scene.meta.vectors_per_segment;
    let width = 6 + scene.lane_attr_dim();
    let mut x = Tensor::zeros(n_m * s_len, width);
    let mut valid = vec![false; n_m * s_len];
    for (m, seg) in scene.segments.iter().enumerate() {
        for s in 0..s_len {
            if !seg.mask[s] {
                continue;
            }
            let r = s * n_m + m;
            valid[r] = true;
            let v = &seg.vectors[s];
            let row = x.row_mut(r);
            let coords = [v.start_x, v.start_y, v.end_x, v.end_y, v.pred_x, v.pred_y];
            for (o, c) in row.iter_mut().zip(coords) {
                *o = c * COORD_SCALE;
            }
            row[6..].copy_from_slice(&v.attributes);
        }
    }
    (x, valid)
}

/// Agent step features in step-major order (row `t * N_v + v`).
pub fn agent_features(scene: &Scene) -> (Tensor, Vec<bool>) {
    let n_v = scene.agents.len();
    let t_h = scene.meta.history_len;
    let width = 4 + scene.agent_attr_dim();
    let mut x = Tensor::zeros(n_v * t_h, width);
    let mut valid = vec![false; n_v * t_h];
    for (a, agent) in scene.agents.iter().enumerate() {
        for t in 0..t_h {
            if !agent.mask[t] {
                continue;
            }
            let r = t * n_v + a;
            valid[r] = true;
            let st = &agent.steps[t];
            let row = x.row_mut(r);
            let coords = [st.start_x, st.start_y, st.end_x, st.end_y];
            for (o, c) in row.iter_mut().zip(coords) {
                *o = c * COORD_SCALE;
            }
            row[4..].copy_from_slice(&st.attributes);
        }
    }
    (x, valid)
}
