//! Layers built on the tape: linear maps, MLPs, pre-norm attention blocks
//! and recurrent cells.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, input, output, bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, 1, output, bound));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

/// `Linear -> LayerNorm -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub norm: LayerNorm,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), input, hidden),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = self.norm.forward(g, h);
        let h = g.gelu(h);
        self.second.forward(g, h)
    }
}

/// Pre-norm transformer block: attention sublayer then feed-forward
/// sublayer, each with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub query_norm: LayerNorm,
    pub context_norm: Option<LayerNorm>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl AttentionBlock {
    /// Cross-attention from `dim`-wide queries to `context_dim`-wide keys/values.
    pub fn cross(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        Self::build(store, rng, name, dim, Some(context_dim), heads, ff_hidden)
    }

    pub fn self_attention(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        Self::build(store, rng, name, dim, None, heads, ff_hidden)
    }

    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        context_dim: Option<usize>,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        assert!(dim % heads == 0, "hidden size {dim} not divisible by {heads} heads");
        let kv_in = context_dim.unwrap_or(dim);
        Self {
            heads,
            query_norm: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            context_norm: context_dim.map(|c| LayerNorm::new(store, &format!("{name}.norm_kv"), c)),
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.k"), kv_in, dim),
            wv: Linear::new(store, rng, &format!("{name}.v"), kv_in, dim),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            ff_norm: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(store, rng, &format!("{name}.ff.0"), dim, ff_hidden),
            ff_out: Linear::new(store, rng, &format!("{name}.ff.1"), ff_hidden, dim),
        }
    }

    /// Returns the block output and the raw attention node.
    ///
    /// `allow` is a row-major `Nq x Nk` mask; with `context == None` the
    /// block attends over its own (normalized) input.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Option<Var>, allow: &[bool]) -> (Var, Var) {
        let xn = self.query_norm.forward(g, x);
        let cn = match (context, &self.context_norm) {
            (Some(c), Some(norm)) => norm.forward(g, c),
            (None, None) => xn,
            _ => panic!("attention block used with the wrong context kind"),
        };
        let q = self.wq.forward(g, xn);
        let k = self.wk.forward(g, cn);
        let v = self.wv.forward(g, cn);
        let attn = g.attention(q, k, v, self.heads, allow);
        let o = self.wo.forward(g, attn);
        let o = g.dropout(o);
        let x1 = g.add(x, o);
        let h = self.ff_norm.forward(g, x1);
        let h = self.ff_in.forward(g, h);
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, h);
        let h = g.dropout(h);
        (g.add(x1, h), attn)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

/// Gated recurrent unit (reset/update/new gate ordering).
#[derive(Clone, Debug)]
pub struct Gru {
    pub input_proj: Linear,
    pub hidden_proj: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input_proj: Linear::new(store, rng, &format!("{name}.ih"), input, 3 * hidden),
            hidden_proj: Linear::new(store, rng, &format!("{name}.hh"), hidden, 3 * hidden),
            hidden,
        }
    }

    fn step(&self, g: &mut Graph, xp: Var, h: Var) -> Var {
        let hd = self.hidden;
        let hp = self.hidden_proj.forward(g, h);
        let x_rz = g.slice_cols(xp, 0, 2 * hd);
        let h_rz = g.slice_cols(hp, 0, 2 * hd);
        let rz = g.add(x_rz, h_rz);
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd);
        let z = g.slice_cols(rz, hd, 2 * hd);
        let x_n = g.slice_cols(xp, 2 * hd, 3 * hd);
        let h_n = g.slice_cols(hp, 2 * hd, 3 * hd);
        let gated = g.mul(r, h_n);
        let n = g.add(x_n, gated);
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

/// Long short-term memory cell (input/forget/cell/output gate ordering).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_proj: Linear,
    pub hidden_proj: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input_proj: Linear::new(store, rng, &format!("{name}.ih"), input, 4 * hidden),
            hidden_proj: Linear::new(store, rng, &format!("{name}.hh"), hidden, 4 * hidden),
            hidden,
        }
    }

    fn step(&self, g: &mut Graph, xp: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let hp = self.hidden_proj.forward(g, h);
        let pre = g.add(xp, hp);
        let ifo_pre = g.slice_cols(pre, 0, 2 * hd);
        let o_pre = g.slice_cols(pre, 3 * hd, 4 * hd);
        let ifo = g.sigmoid(ifo_pre);
        let i = g.slice_cols(ifo, 0, hd);
        let f = g.slice_cols(ifo, hd, 2 * hd);
        let o = g.sigmoid(o_pre);
        let cand = g.slice_cols(pre, 2 * hd, 3 * hd);
        let cand = g.tanh(cand);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        let c_new = g.add(fc, ic);
        let ct = g.tanh(c_new);
        (g.mul(o, ct), c_new)
    }
}

#[derive(Clone, Debug)]
pub enum Recurrent {
    Gru(Gru),
    Lstm(Lstm),
}

impl Recurrent {
    pub fn new(
        kind: CellKind,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        match kind {
            CellKind::Gru => Recurrent::Gru(Gru::new(store, rng, name, input, hidden)),
            CellKind::Lstm => Recurrent::Lstm(Lstm::new(store, rng, name, input, hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Recurrent::Gru(c) => c.hidden,
            Recurrent::Lstm(c) => c.hidden,
        }
    }

    /// Runs the cell over `steps` time steps of a batch.
    ///
    /// `inputs` holds `steps * batch` rows in step-major order (row
    /// `t * batch + b`). Where `valid[t * batch + b]` is false the state of
    /// row `b` is carried over unchanged. Returns the hidden state after every
    /// step, each `batch x hidden`.
    pub fn run(
        &self,
        g: &mut Graph,
        inputs: Var,
        batch: usize,
        steps: usize,
        h0: Var,
        valid: Option<&[bool]>,
    ) -> Vec<Var> {
        assert_eq!(g.shape(inputs).0, batch * steps, "recurrent input rows");
        let mut outs = Vec::with_capacity(steps);
        match self {
            Recurrent::Gru(cell) => {
                let xp_all = cell.input_proj.forward(g, inputs);
                let mut h = h0;
                for t in 0..steps {
                    let xp = g.slice_rows(xp_all, t * batch, (t + 1) * batch);
                    let h_new = cell.step(g, xp, h);
                    h = match valid {
                        Some(v) => select_step(g, &v[t * batch..(t + 1) * batch], h_new, h),
                        None => h_new,
                    };
                    outs.push(h);
                }
            }
            Recurrent::Lstm(cell) => {
                let xp_all = cell.input_proj.forward(g, inputs);
                let mut h = h0;
                let mut c = g.constant(Tensor::zeros(batch, cell.hidden));
                for t in 0..steps {
                    let xp = g.slice_rows(xp_all, t * batch, (t + 1) * batch);
                    let (h_new, c_new) = cell.step(g, xp, h, c);
                    match valid {
                        Some(v) => {
                            let m = &v[t * batch..(t + 1) * batch];
                            h = select_step(g, m, h_new, h);
                            c = select_step(g, m, c_new, c);
                        }
                        None => {
                            h = h_new;
                            c = c_new;
                        }
                    }
                    outs.push(h);
                }
            }
        }
        outs
    }
}

fn select_step(g: &mut Graph, mask: &[bool], new: Var, old: Var) -> Var {
    if mask.iter().all(|&m| m) {
        new
    } else {
        g.select(mask, new, old)
    }
}
