//! Parameterised building blocks.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so a
//! model can be cloned, frozen, hashed, or checkpointed as one unit.

use rand::Rng;

use crate::graph::{concat_cols, BatchStats, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-forward-pass state: train/eval mode and pending running-stat updates.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        ForwardCtx { train: true, bn_updates: Vec::new() }
    }

    pub fn eval() -> Self {
        ForwardCtx { train: false, bn_updates: Vec::new() }
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_running_stats(self, store: &mut ParamStore, momentum: f32) {
        for (mean_id, var_id, stats) in self.bn_updates {
            for (r, b) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_kaiming(format!("{name}.w"), &[in_dim, out_dim], in_dim, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.matmul(g.param(store, self.w)).add_bias(g.param(store, self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add_kaiming(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], fan_in, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_ch])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        let y = x.conv2d(g.param(store, self.w), self.stride, self.pad);
        match self.b {
            Some(b) => y.add_channel_bias(g.param(store, b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, ctx: &mut ForwardCtx) -> Var<'g> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        if ctx.train {
            let (y, stats) = x.batch_norm(gamma, beta);
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            y
        } else {
            x.batch_norm_eval(gamma, beta, store.get(self.running_mean).data(), store.get(self.running_var).data())
        }
    }
}

/// Single LSTM layer unrolled over a sequence of `[B, in]` inputs.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = store.add_kaiming(format!("{name}.wx"), &[in_dim, 4 * hidden], in_dim + hidden, rng);
        let wh = store.add_kaiming(format!("{name}.wh"), &[hidden, 4 * hidden], in_dim + hidden, rng);
        // gate order: input, forget, cell, output; forget bias starts at 1
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), Tensor::from_vec(&[4 * hidden], b));
        Lstm { wx, wh, b, hidden }
    }

    /// Returns the hidden state at every step.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, xs: &[Var<'g>]) -> Vec<Var<'g>> {
        let (wx, wh, b) = (g.param(store, self.wx), g.param(store, self.wh), g.param(store, self.b));
        let h_dim = self.hidden;
        let batch = xs[0].shape()[0];
        let mut h = g.input(Tensor::zeros(&[batch, h_dim]));
        let mut c = g.input(Tensor::zeros(&[batch, h_dim]));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let gates = x.matmul(wx).add(h.matmul(wh)).add_bias(b);
            let i = gates.slice_cols(0, h_dim).sigmoid();
            let f = gates.slice_cols(h_dim, h_dim).sigmoid();
            let cand = gates.slice_cols(2 * h_dim, h_dim).tanh();
            let o = gates.slice_cols(3 * h_dim, h_dim).sigmoid();
            c = f.mul(c).add(i.mul(cand));
            h = o.mul(c.tanh());
            out.push(h);
        }
        out
    }
}

/// Additive attention over a sequence of `[B, H]` states.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub proj: Linear,
    pub score: ParamId,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, attn_dim: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), hidden, attn_dim, rng);
        let score = store.add_kaiming(format!("{name}.v"), &[attn_dim, 1], attn_dim, rng);
        AdditiveAttention { proj, score }
    }

    /// Returns `(context [B, H], weights [B, T])`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, states: &[Var<'g>]) -> (Var<'g>, Var<'g>) {
        let v = g.param(store, self.score);
        let scores: Vec<Var<'g>> = states.iter().map(|&h| self.proj.forward(g, store, h).tanh().matmul(v)).collect();
        let weights = concat_cols(&scores).softmax_rows();
        let mut ctx: Option<Var<'g>> = None;
        for (t, &h) in states.iter().enumerate() {
            let term = h.mul_col(weights.slice_cols(t, 1));
            ctx = Some(match ctx {
                Some(acc) => acc.add(term),
                None => term,
            });
        }
        (ctx.expect("attention over an empty sequence"), weights)
    }
}
