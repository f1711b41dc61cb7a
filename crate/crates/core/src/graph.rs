//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! adjoints. Parameters are referenced from a borrowed [`ParamStore`] instead
//! of being copied onto the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp { a: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Gather { a: Var, idx: Vec<usize> },
    Select { mask: Vec<bool>, a: Var, b: Var },
    Softmax { a: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    SumAll(Var),
    RowSum(Var),
    Reshape(Var),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

impl Node {
    fn value_shape(&self, params: &ParamStore) -> (usize, usize) {
        match &self.value {
            Value::Owned(t) => t.shape(),
            Value::Param(id) => params.get(*id).shape(),
        }
    }
}

/// Attention probabilities recorded by [`Graph::attention`].
pub struct AttentionWeights<'a> {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub probs: &'a [f64],
}

impl AttentionWeights<'_> {
    pub fn get(&self, head: usize, q: usize, k: usize) -> f64 {
        self.probs[(head * self.queries + q) * self.keys + k]
    }

    pub fn row(&self, head: usize, q: usize) -> &[f64] {
        let start = (head * self.queries + q) * self.keys;
        &self.probs[start..start + self.keys]
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    attention_log: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            attention_log: Vec::new(),
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate for subsequent
    /// [`Graph::dropout`] calls.
    pub fn enable_dropout(&mut self, rate: f64, rng: ChaCha8Rng) {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
    }

    /// Identity unless dropout was enabled on this graph.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = &mut self.dropout else {
            return x;
        };
        let rate = *rate;
        let (n, c) = self.nodes[x.0].value_shape(self.params);
        let keep = 1.0 / (1.0 - rate);
        let data = (0..n * c)
            .map(|_| if rng.random_range(0.0..1.0) < rate { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::from_vec(n, c, data));
        self.mul(x, m)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Every attention node created so far, in creation order.
    pub fn attention_nodes(&self) -> &[Var] {
        &self.attention_log
    }

    pub fn attention_weights(&self, v: Var) -> Option<AttentionWeights<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => Some(AttentionWeights {
                heads: *heads,
                queries: self.value(*q).rows(),
                keys: self.value(*k).rows(),
                probs,
            }),
            _ => None,
        }
    }

    /// `x * w + b` with `w` of shape `in x out` and `b` of shape `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear: input width mismatch");
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols()));
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.data());
            }
            gemm(1.0, xv.view(), wv.view(), 1.0, out.view_mut());
        } else {
            gemm(1.0, xv.view(), wv.view(), 0.0, out.view_mut());
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "add_row: shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow { a, row })
    }

    /// Multiplies every row of `a` by the matching entry of an `N x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let av = self.value(a);
        let cv = self.value(col);
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col: shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= c;
            }
        }
        self.push(out, Op::MulCol { a, col })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Offset(a))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
        };
        let t = self.value(a).map(f);
        self.push(t, Op::Unary(a, kind))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp { a, lo, hi })
    }

    /// Row-wise layer normalization with affine `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (n, c) = xv.shape();
        assert_eq!(gv.shape(), (1, c));
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.set(r, j, h);
                out.set(r, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(n, width);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols: row mismatch");
            let w = pv.cols();
            for r in 0..n {
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows: col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols());
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    /// Rows `idx[i]` of `a`, in order; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(idx.len(), c);
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(j));
        }
        self.push(
            out,
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(a, &idx)
    }

    /// Row-wise choice: row `r` comes from `a` where `mask[r]`, else from `b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(mask.len(), av.rows());
        let mut out = bv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        self.push(
            out,
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
        )
    }

    /// Zeroes the rows where `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        if keep.iter().all(|&k| k) {
            return a;
        }
        let (n, c) = self.shape(a);
        let z = self.constant(Tensor::zeros(n, c));
        self.select(keep, a, z)
    }

    /// Row-wise softmax. Disallowed entries get probability exactly zero; a
    /// row with no allowed entry is all zeros.
    pub fn softmax(&mut self, a: Var, allow: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        if let Some(m) = allow {
            assert_eq!(m.len(), n * c);
        }
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let ok = |j: usize| allow.is_none_or(|m| m[r * c + j]);
            softmax_row(av.row(r), ok, out.row_mut(r));
        }
        self.push(out, Op::Softmax { a })
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q` is `Nq x C`, `k` is `Nk x C`, `v` is `Nk x Cv`; both widths must be
    /// divisible by `heads`. `allow` is an `Nq x Nk` row-major mask of keys each
    /// query may attend to.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allow: &[bool]) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (nq, c) = qv.shape();
        let nk = kv.rows();
        let cv = vv.cols();
        assert_eq!(kv.cols(), c, "attention: key width");
        assert_eq!(vv.rows(), nk, "attention: value rows");
        assert!(c % heads == 0 && cv % heads == 0, "attention: head split");
        assert_eq!(allow.len(), nq * nk, "attention: mask shape");
        let d = c / heads;
        let dv = cv / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = Tensor::zeros(nq, cv);
        let mut scores = Tensor::zeros(nq, nk);
        for h in 0..heads {
            gemm(
                scale,
                qv.col_block(h * d, d),
                kv.col_block(h * d, d).t(),
                0.0,
                scores.view_mut(),
            );
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            for r in 0..nq {
                softmax_row(
                    scores.row(r),
                    |j| allow[r * nk + j],
                    &mut p[r * nk..(r + 1) * nk],
                );
            }
            let pt = Tensor::from_vec(nq, nk, p.to_vec());
            gemm(
                1.0,
                pt.view(),
                vv.col_block(h * dv, dv),
                0.0,
                out.col_block_mut(h * dv, dv),
            );
        }
        let var = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        );
        self.attention_log.push(var);
        var
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over columns: `N x C -> N x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.push(Tensor::from_vec(av.rows(), 1, data), Op::RowSum(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshaped(rows, cols);
        self.push(t, Op::Reshape(a))
    }

    /// Reverse pass from a scalar node; returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
        params_out: &mut Gradients,
    ) {
        let node = &self.nodes[i];
        let out_val = self.value(Var(i));
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params_out.accumulate(*id, gout),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                gemm(1.0, gout.view(), wv.view().t(), 0.0, gx.view_mut());
                let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                gemm(1.0, xv.view().t(), gout.view(), 0.0, gw.view_mut());
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                if let Some(b) = b {
                    acc(grads, *b, col_sums(gout));
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                gemm(1.0, gout.view(), bv.view().t(), 0.0, ga.view_mut());
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                gemm(1.0, av.view().t(), gout.view(), 0.0, gb.view_mut());
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(grads, *a, hadamard(gout, bv));
                acc(grads, *b, hadamard(gout, av));
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = zip_map(gout, bv, |g, y| g / y);
                let gb = Tensor::from_vec(
                    gout.rows(),
                    gout.cols(),
                    gout.data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect(),
                );
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddRow { a, row } => {
                acc(grads, *a, gout.clone());
                acc(grads, *row, col_sums(gout));
            }
            Op::MulCol { a, col } => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let mut ga = gout.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for r in 0..ga.rows() {
                    let c = cv.data()[r];
                    let mut s = 0.0;
                    for (g, x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                        s += *g * x;
                        *g *= c;
                    }
                    gc.data_mut()[r] = s;
                }
                acc(grads, *a, ga);
                acc(grads, *col, gc);
            }
            Op::Scale(a, c) => acc(grads, *a, gout.map(|x| x * c)),
            Op::Offset(a) => acc(grads, *a, gout.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = out_val;
                let data = gout
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * unary_grad(*kind, x, y))
                    .collect();
                acc(grads, *a, Tensor::from_vec(x.rows(), x.cols(), data));
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a);
                let ga = zip_map(gout, x, |g, x| if x < *lo || x > *hi { 0.0 } else { g });
                acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (n, c) = xhat.shape();
                let mut gx = Tensor::zeros(n, c);
                let mut gg = Tensor::zeros(1, c);
                let mut gb = Tensor::zeros(1, c);
                let mut dxhat = vec![0.0; c];
                for r in 0..n {
                    let go = gout.row(r);
                    let xh = xhat.row(r);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        gg.data_mut()[j] += go[j] * xh[j];
                        gb.data_mut()[j] += go[j];
                        dxhat[j] = go[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let row = gx.row_mut(r);
                    for j in 0..c {
                        row[j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (n, w) = self.shape(p);
                    let mut gp = Tensor::zeros(n, w);
                    for r in 0..n {
                        gp.row_mut(r).copy_from_slice(&gout.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (n, c) = self.shape(p);
                    let gp = Tensor::from_vec(n, c, gout.data()[off * c..(off + n) * c].to_vec());
                    off += n;
                    acc(grads, p, gp);
                }
            }
            Op::SliceCols { a, start } => {
                let (n, c) = self.shape(*a);
                let w = gout.cols();
                let mut ga = Tensor::zeros(n, c);
                for r in 0..n {
                    ga.row_mut(r)[*start..*start + w].copy_from_slice(gout.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::Gather { a, idx } => {
                let (n, c) = self.shape(*a);
                let mut ga = Tensor::zeros(n, c);
                for (i, &j) in idx.iter().enumerate() {
                    for (d, g) in ga.row_mut(j).iter_mut().zip(gout.row(i)) {
                        *d += g;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Select { mask, a, b } => {
                let (n, c) = gout.shape();
                let mut ga = Tensor::zeros(n, c);
                let mut gb = Tensor::zeros(n, c);
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        ga.row_mut(r).copy_from_slice(gout.row(r));
                    } else {
                        gb.row_mut(r).copy_from_slice(gout.row(r));
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Softmax { a } => {
                let (n, c) = out_val.shape();
                let mut ga = Tensor::zeros(n, c);
                for r in 0..n {
                    softmax_row_grad(out_val.row(r), gout.row(r), ga.row_mut(r));
                }
                acc(grads, *a, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (nq, c) = qv.shape();
                let nk = kv.rows();
                let cv = vv.cols();
                let d = c / heads;
                let dv = cv / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = Tensor::zeros(nq, c);
                let mut gk = Tensor::zeros(nk, c);
                let mut gvv = Tensor::zeros(nk, cv);
                let mut dp = Tensor::zeros(nq, nk);
                for h in 0..*heads {
                    let p = Tensor::from_vec(nq, nk, probs[h * nq * nk..(h + 1) * nq * nk].to_vec());
                    // dP = dO_h V_h^T
                    gemm(
                        1.0,
                        gout.col_block(h * dv, dv),
                        vv.col_block(h * dv, dv).t(),
                        0.0,
                        dp.view_mut(),
                    );
                    // dV_h = P^T dO_h
                    gemm(
                        1.0,
                        p.view().t(),
                        gout.col_block(h * dv, dv),
                        0.0,
                        gvv.col_block_mut(h * dv, dv),
                    );
                    let mut ds = Tensor::zeros(nq, nk);
                    for r in 0..nq {
                        softmax_row_grad(p.row(r), dp.row(r), ds.row_mut(r));
                    }
                    gemm(
                        scale,
                        ds.view(),
                        kv.col_block(h * d, d),
                        0.0,
                        gq.col_block_mut(h * d, d),
                    );
                    gemm(
                        scale,
                        ds.view().t(),
                        qv.col_block(h * d, d),
                        0.0,
                        gk.col_block_mut(h * d, d),
                    );
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gvv);
            }
            Op::SumAll(a) => {
                let (n, c) = self.shape(*a);
                acc(grads, *a, Tensor::full(n, c, gout.item()));
            }
            Op::RowSum(a) => {
                let (n, c) = self.shape(*a);
                let mut ga = Tensor::zeros(n, c);
                for r in 0..n {
                    let g = gout.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|x| *x = g);
                }
                acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (n, c) = self.shape(*a);
                acc(grads, *a, gout.clone().reshaped(n, c));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn softmax_row(x: &[f64], allow: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allow(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if allow(j) {
            *o = (v - max).exp();
            total += *o;
        } else {
            *o = 0.0;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn softmax_row_grad(p: &[f64], gp: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
    for ((o, &pj), &gj) in out.iter_mut().zip(p).zip(gp) {
        *o = pj * (gj - dot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `f` with respect to every parameter entry.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root)
        };
        let eps = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for j in 0..store.get(id).len() {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + eps;
                let lp = {
                    let mut g = Graph::new(store);
                    let r = f(&mut g);
                    g.value(r).item()
                };
                store.get_mut(id).data_mut()[j] = orig - eps;
                let lm = {
                    let mut g = Graph::new(store);
                    let r = f(&mut g);
                    g.value(r).item()
                };
                store.get_mut(id).data_mut()[j] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let ana = grads.get(id).map_or(0.0, |t| t.data()[j]);
                let tol = 1e-6 + 1e-5 * num.abs().max(ana.abs());
                assert!(
                    (num - ana).abs() <= tol,
                    "{} [{j}]: numeric {num} analytic {ana}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 3, 4));
        let b = store.add("b", rand_tensor(&mut rng, 3, 4).map(|x| x + 2.5));
        let row = store.add("row", rand_tensor(&mut rng, 1, 4));
        let col = store.add("col", rand_tensor(&mut rng, 3, 1));
        check(&mut store, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let row = g.param(row);
            let col = g.param(col);
            let x = g.mul(a, b);
            let y = g.div(x, b);
            let y = g.add_row(y, row);
            let y = g.mul_col(y, col);
            let s1 = g.gelu(y);
            let s2 = g.tanh(a);
            let s3 = g.softplus(b);
            let s4 = g.sigmoid(a);
            let e = g.exp(s4);
            let l = g.ln(b);
            let sq = g.sqrt(b);
            let ab = g.abs(a);
            let sq2 = g.square(s1);
            let t = g.sub(s2, s3);
            let parts = [t, e, l, sq, ab, sq2];
            let cat = g.concat_cols(&parts);
            let rs = g.row_sum(cat);
            let sc = g.scale(rs, 0.3);
            let off = g.offset(sc, 1.0);
            g.sum(off)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 4, 3));
        let b = store.add("b", rand_tensor(&mut rng, 4, 3));
        let w = store.add("w", rand_tensor(&mut rng, 3, 5));
        let bias = store.add("bias", rand_tensor(&mut rng, 1, 5));
        let gamma = store.add("gamma", rand_tensor(&mut rng, 1, 5));
        let beta = store.add("beta", rand_tensor(&mut rng, 1, 5));
        check(&mut store, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let w = g.param(w);
            let bias = g.param(bias);
            let sel = g.select(&[true, false, false, true], a, b);
            let rows = g.concat_rows(&[sel, a]);
            let gathered = g.gather(rows, &[7, 0, 0, 3, 5]);
            let lin = g.linear(gathered, w, Some(bias));
            let gm = g.param(gamma);
            let bt = g.param(beta);
            let ln = g.layer_norm(lin, gm, bt);
            let sl = g.slice_cols(ln, 1, 4);
            let sm = g.softmax(sl, Some(&[
                true, true, false, true, true, true, false, true, true, true, false, true, true,
                true, true,
            ]));
            let cl = g.clamp(sm, 0.05, 0.9);
            let r = g.reshape(cl, 3, 5);
            let wt = g.matmul(r, lin);
            let shifted = g_abs_plus(g, wt);
            let lw = g.ln(shifted);
            g.mean(lw)
        });
    }

    fn g_abs_plus(g: &mut Graph, v: Var) -> Var {
        let a = g.abs(v);
        g.offset(a, 0.5)
    }

    #[test]
    fn attention_gradients_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let q = store.add("q", rand_tensor(&mut rng, 3, 4));
        let k = store.add("k", rand_tensor(&mut rng, 5, 4));
        let v = store.add("v", rand_tensor(&mut rng, 5, 6));
        let allow = vec![
            true, false, true, true, false, //
            false, false, false, false, false, //
            true, true, true, true, true,
        ];
        check(&mut store, |g| {
            let q = g.param(q);
            let k = g.param(k);
            let v = g.param(v);
            let o = g.attention(q, k, v, 2, &allow);
            let s = g.square(o);
            g.sum(s)
        });
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
        let o = g.attention(qv, kv, vv, 2, &allow);
        let w = g.attention_weights(o).unwrap();
        for h in 0..2 {
            let r0: f64 = w.row(h, 0).iter().sum();
            assert!((r0 - 1.0).abs() < 1e-12);
            assert_eq!(w.get(h, 0, 1), 0.0);
            assert!(w.row(h, 1).iter().all(|&p| p == 0.0));
        }
        assert!(g.value(o).row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_disallowed() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_vec(2, 3, vec![1.0, 1000.0, -3.0, 0.0, 0.0, 0.0]));
        let s = g.softmax(x, Some(&[true, false, true, true, true, true]));
        let v = g.value(s);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }
}
