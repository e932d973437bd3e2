//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! every parameter leaf that took part in the computation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::par::Parallelism;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

const NORM_EPS: f32 = 1e-5;

enum Op {
    Input,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    AddBias { x: usize, b: usize },
    ChannelBias { x: usize, b: usize },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Norm { x: usize, affine: Option<(usize, usize)>, xhat: Tensor, inv_std: Vec<f32>, per_sample: bool },
    NormEval { x: usize, gamma: usize, xhat: Tensor, inv_std: Vec<f32>, beta: usize },
    Relu(usize),
    LeakyRelu(usize, f32),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Square(usize),
    GlobalAvgPool(usize),
    Upsample2x(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    MulCol { x: usize, s: usize },
    SoftmaxRows(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor },
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<(u64, usize), usize>>,
    par: Parallelism,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Parallelism::default())
    }
}

impl Graph {
    pub fn new(par: Parallelism) -> Self {
        Graph { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), par }
    }

    pub fn parallelism(&self) -> Parallelism {
        self.par
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { g: self, id: nodes.len() - 1 }
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Input, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.uid(), id.0);
        if let Some(&nid) = self.params.borrow().get(&key) {
            return Var { g: self, id: nid };
        }
        let v = self.push(store.get(id).clone(), Op::Param, store.is_trainable(id));
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach<'g>(&'g self, v: Var<'g>) -> Var<'g> {
        let t = (*self.val(v.id)).clone();
        self.input(t)
    }

    fn unary(&self, x: usize, value: Tensor, op: Op) -> Var<'_> {
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            if matches!(node.op, Op::Param) {
                grads[id] = Some(gy);
                continue;
            }
            for (pid, g) in self.local_grads(&nodes, id, &gy) {
                if !nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut out = HashMap::new();
        for (&key, &nid) in self.params.borrow().iter() {
            if let Some(g) = grads[nid].take() {
                out.insert(key, g);
            }
        }
        Gradients { grads: out }
    }

    fn local_grads(&self, nodes: &[Node], id: usize, gy: &Tensor) -> Vec<(usize, Tensor)> {
        let y = &nodes[id].value;
        let v = |i: usize| -> &Tensor { &nodes[i].value };
        match &nodes[id].op {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, gy.map(|g| -g))],
            Op::Mul(a, b) => {
                let ga = zip_map(gy, v(*b), |g, x| g * x);
                let gb = zip_map(gy, v(*a), |g, x| g * x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, gy.map(|g| g * s))]
            }
            Op::AddScalar(a) => vec![(*a, gy.clone())],
            Op::AddBias { x, b } => {
                let f = v(*b).len();
                let mut gb = vec![0.0; f];
                for row in gy.data().chunks(f) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![(*x, gy.clone()), (*b, Tensor::from_vec(v(*b).shape(), gb))]
            }
            Op::ChannelBias { x, b } => {
                let s = gy.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                for (i, plane) in gy.data().chunks(hw).enumerate() {
                    gb[i % c] += plane.iter().sum::<f32>();
                }
                vec![(*x, gy.clone()), (*b, Tensor::from_vec(v(*b).shape(), gb))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, gy.data(), false, tb.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, gy.data(), false, &mut gb, 0.0);
                vec![(*a, Tensor::from_vec(&[m, k], ga)), (*b, Tensor::from_vec(&[k, n], gb))]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = conv2d_backward(self.par, v(*x), v(*w), gy, *stride, *pad);
                vec![(*x, gx), (*w, gw)]
            }
            Op::Norm { x, affine, xhat, inv_std, per_sample } => {
                let gamma = affine.map(|(g, _)| v(g).data().to_vec());
                let (gx, gg, gb) = norm_backward(gy, xhat, inv_std, gamma.as_deref(), *per_sample);
                let mut out = vec![(*x, gx)];
                if let Some((g, b)) = affine {
                    out.push((*g, Tensor::from_vec(v(*g).shape(), gg)));
                    out.push((*b, Tensor::from_vec(v(*b).shape(), gb)));
                }
                out
            }
            Op::NormEval { x, gamma, beta, xhat, inv_std } => {
                let s = gy.shape();
                let (c, hw) = (s[1], s.get(2).copied().unwrap_or(1) * s.get(3).copied().unwrap_or(1));
                let gam = v(*gamma).data();
                let mut gx = gy.clone();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (i, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let ch = i % c;
                    let xh = &xhat.data()[i * hw..(i + 1) * hw];
                    for (g, xv) in plane.iter_mut().zip(xh) {
                        gg[ch] += *g * xv;
                        gb[ch] += *g;
                        *g *= gam[ch] * inv_std[ch];
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::from_vec(v(*gamma).shape(), gg)),
                    (*beta, Tensor::from_vec(v(*beta).shape(), gb)),
                ]
            }
            Op::Relu(a) => vec![(*a, zip_map(gy, y, |g, o| if o > 0.0 { g } else { 0.0 }))],
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                vec![(*a, zip_map(gy, v(*a), |g, x| if x > 0.0 { g } else { g * s }))]
            }
            Op::Tanh(a) => vec![(*a, zip_map(gy, y, |g, o| g * (1.0 - o * o)))],
            Op::Sigmoid(a) => vec![(*a, zip_map(gy, y, |g, o| g * o * (1.0 - o)))],
            Op::Abs(a) => vec![(*a, zip_map(gy, v(*a), |g, x| g * sign(x)))],
            Op::Square(a) => vec![(*a, zip_map(gy, v(*a), |g, x| 2.0 * g * x))],
            Op::GlobalAvgPool(a) => {
                let s = v(*a).shape().to_vec();
                let hw = s[2] * s[3];
                let mut gx = Vec::with_capacity(v(*a).len());
                for &g in gy.data() {
                    gx.extend(std::iter::repeat_n(g / hw as f32, hw));
                }
                vec![(*a, Tensor::from_vec(&s, gx))]
            }
            Op::Upsample2x(a) => {
                let s = v(*a).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![0.0; v(*a).len()];
                let gd = gy.data();
                for (p, out) in gx.chunks_mut(h * w).enumerate() {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let r0 = 2 * i * 2 * w + 2 * j;
                            let r1 = r0 + 2 * w;
                            out[i * w + j] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
                        }
                    }
                }
                vec![(*a, Tensor::from_vec(&s, gx))]
            }
            Op::Reshape(a) => vec![(*a, gy.clone().reshape(v(*a).shape()))],
            Op::SliceCols { x, start } => {
                let s = v(*x).shape();
                let (rows, cols) = (s[0], s[1]);
                let len = gy.dim(1);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(gy.row(r));
                }
                vec![(*x, Tensor::from_vec(&[rows, cols], gx))]
            }
            Op::ConcatCols(parts) => {
                let rows = gy.dim(0);
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = v(p).dim(1);
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&gy.row(r)[off..off + w]);
                    }
                    out.push((p, Tensor::from_vec(&[rows, w], gp)));
                    off += w;
                }
                out
            }
            Op::MulCol { x, s } => {
                let (tx, ts) = (v(*x), v(*s));
                let w = tx.dim(1);
                let mut gx = gy.clone();
                let mut gs = vec![0.0; ts.len()];
                for (r, row) in gx.data_mut().chunks_mut(w).enumerate() {
                    let sv = ts.data()[r];
                    let xr = tx.row(r);
                    for (g, xv) in row.iter_mut().zip(xr) {
                        gs[r] += *g * xv;
                        *g *= sv;
                    }
                }
                vec![(*x, gx), (*s, Tensor::from_vec(ts.shape(), gs))]
            }
            Op::SoftmaxRows(a) => {
                let w = y.dim(1);
                let mut gx = gy.clone();
                for (r, row) in gx.data_mut().chunks_mut(w).enumerate() {
                    let yr = y.row(r);
                    let dot: f32 = row.iter().zip(yr).map(|(g, o)| g * o).sum();
                    for (g, o) in row.iter_mut().zip(yr) {
                        *g = o * (*g - dot);
                    }
                }
                vec![(*a, gx)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = gy.item() / labels.len() as f32;
                let c = probs.dim(1);
                let mut gx = probs.clone();
                for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                    row[labels[r]] -= 1.0;
                    for g in row.iter_mut() {
                        *g *= scale;
                    }
                }
                vec![(*logits, gx)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), gy.item()))],
            Op::Mean(a) => {
                let n = v(*a).len() as f32;
                vec![(*a, Tensor::full(v(*a).shape(), gy.item() / n))]
            }
        }
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Gradients of parameter leaves, keyed by store and parameter.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<(u64, usize), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&(store.uid(), id.0))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

// Named methods rather than operator traits keep chained graph code readable.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.g.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = zip_map(&self.value(), &other.value(), |a, b| a + b);
        self.g.binary(self.id, other.id, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = zip_map(&self.value(), &other.value(), |a, b| a - b);
        self.g.binary(self.id, other.id, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = zip_map(&self.value(), &other.value(), |a, b| a * b);
        self.g.binary(self.id, other.id, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.g.unary(self.id, v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.g.unary(self.id, v, Op::AddScalar(self.id))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(self, b: Var<'g>) -> Var<'g> {
        let bv = b.value();
        let f = bv.len();
        let mut out = (*self.value()).clone();
        assert_eq!(out.shape().last().copied(), Some(f), "bias width mismatch");
        for row in out.data_mut().chunks_mut(f) {
            for (x, bb) in row.iter_mut().zip(bv.data()) {
                *x += bb;
            }
        }
        self.g.binary(self.id, b.id, out, Op::AddBias { x: self.id, b: b.id })
    }

    /// Adds a per-channel bias to an `[N, C, H, W]` tensor.
    pub fn add_channel_bias(self, b: Var<'g>) -> Var<'g> {
        let bv = b.value();
        let mut out = (*self.value()).clone();
        let s = out.shape().to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        assert_eq!(bv.len(), c);
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bb = bv.data()[i % c];
            for x in plane {
                *x += bb;
            }
        }
        self.g.binary(self.id, b.id, out, Op::ChannelBias { x: self.id, b: b.id })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2);
        assert_eq!(b.ndim(), 2);
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(k, b.dim(0), "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        self.g.binary(self.id, other.id, Tensor::from_vec(&[m, n], c), Op::MatMul(self.id, other.id))
    }

    /// 2-D convolution of `[N, C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(self, w: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let out = conv2d_forward(self.g.par, &self.value(), &w.value(), stride, pad);
        self.g.binary(self.id, w.id, out, Op::Conv2d { x: self.id, w: w.id, stride, pad })
    }

    /// Training-mode batch normalization over all axes except axis 1.
    pub fn batch_norm(self, gamma: Var<'g>, beta: Var<'g>) -> (Var<'g>, BatchStats) {
        let x = self.value();
        let (xhat, inv_std, mean, var) = normalize(&x, false);
        let y = affine(&xhat, gamma.value().data(), beta.value().data());
        let ng = self.g.ng(self.id) || self.g.ng(gamma.id) || self.g.ng(beta.id);
        let op = Op::Norm { x: self.id, affine: Some((gamma.id, beta.id)), xhat, inv_std, per_sample: false };
        (self.g.push(y, op, ng), BatchStats { mean, var })
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(self, gamma: Var<'g>, beta: Var<'g>, mean: &[f32], var: &[f32]) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (c, hw) = (s[1], s.get(2).copied().unwrap_or(1) * s.get(3).copied().unwrap_or(1));
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = (*x).clone();
        for (i, plane) in xhat.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            for e in plane {
                *e = (*e - mean[ch]) * inv_std[ch];
            }
        }
        let y = affine(&xhat, gamma.value().data(), beta.value().data());
        let ng = self.g.ng(self.id) || self.g.ng(gamma.id) || self.g.ng(beta.id);
        let op = Op::NormEval { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        self.g.push(y, op, ng)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(self) -> Var<'g> {
        let x = self.value();
        let (xhat, inv_std, _, _) = normalize(&x, true);
        let y = xhat.clone();
        let op = Op::Norm { x: self.id, affine: None, xhat, inv_std, per_sample: true };
        self.g.unary(self.id, y, op)
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.g.unary(self.id, v, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'g> {
        let v = self.value().map(|x| if x > 0.0 { x } else { x * slope });
        self.g.unary(self.id, v, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f32::tanh);
        self.g.unary(self.id, v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.g.unary(self.id, v, Op::Sigmoid(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        let v = self.value().map(f32::abs);
        self.g.unary(self.id, v, Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.g.unary(self.id, v, Op::Square(self.id))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let hw = s[2] * s[3];
        let data = x.data().chunks(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
        let out = Tensor::from_vec(&[s[0], s[1]], data);
        self.g.unary(self.id, out, Op::GlobalAvgPool(self.id))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(x.len() * 4);
        for plane in x.data().chunks(h * w) {
            for i in 0..h {
                let row = &plane[i * w..(i + 1) * w];
                for _ in 0..2 {
                    for &e in row {
                        out.push(e);
                        out.push(e);
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out);
        self.g.unary(self.id, t, Op::Upsample2x(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let t = (*self.value()).clone().reshape(shape);
        self.g.unary(self.id, t, Op::Reshape(self.id))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let rows = x.dim(0);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        self.g.unary(self.id, Tensor::from_vec(&[rows, len], data), Op::SliceCols { x: self.id, start })
    }

    /// Multiplies each row of `[B, F]` by the matching entry of `[B, 1]`.
    pub fn mul_col(self, s: Var<'g>) -> Var<'g> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), x.dim(0));
        let w = x.dim(1);
        let mut out = (*x).clone();
        for (r, row) in out.data_mut().chunks_mut(w).enumerate() {
            for e in row {
                *e *= sv.data()[r];
            }
        }
        self.g.binary(self.id, s.id, out, Op::MulCol { x: self.id, s: s.id })
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(self) -> Var<'g> {
        let x = self.value();
        let out = softmax_rows(&x);
        self.g.unary(self.id, out, Op::SoftmaxRows(self.id))
    }

    /// Mean categorical cross-entropy of logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.dim(0), labels.len());
        let probs = softmax_rows(&x);
        let c = probs.dim(1);
        let mut loss = 0.0f64;
        for (r, &l) in labels.iter().enumerate() {
            assert!(l < c, "label {l} out of range for {c} classes");
            loss -= (probs.data()[r * c + l].max(1e-12) as f64).ln();
        }
        let v = Tensor::scalar((loss / labels.len() as f64) as f32);
        let op = Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs };
        self.g.unary(self.id, v, op)
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.g.unary(self.id, v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().mean());
        self.g.unary(self.id, v, Op::Mean(self.id))
    }
}

/// Concatenates 2-D tensors along columns.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Var<'g> {
    assert!(!parts.is_empty());
    let g = parts[0].g;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = vals[0].dim(0);
    let width: usize = vals.iter().map(|v| v.dim(1)).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for v in &vals {
            assert_eq!(v.dim(0), rows);
            data.extend_from_slice(v.row(r));
        }
    }
    let ng = parts.iter().any(|p| g.ng(p.id));
    g.push(Tensor::from_vec(&[rows, width], data), Op::ConcatCols(parts.iter().map(|p| p.id).collect()), ng)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let w = x.dim(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum += *e;
        }
        for e in row.iter_mut() {
            *e /= sum;
        }
    }
    out
}

fn affine(xhat: &Tensor, gamma: &[f32], beta: &[f32]) -> Tensor {
    let s = xhat.shape();
    let (c, hw) = (s[1], s.get(2).copied().unwrap_or(1) * s.get(3).copied().unwrap_or(1));
    let mut y = xhat.clone();
    for (i, plane) in y.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        for e in plane {
            *e = *e * gamma[ch] + beta[ch];
        }
    }
    y
}

/// Normalizes per channel (or per sample and channel). Returns
/// `(xhat, inv_std, mean, var)` with one statistic per group.
fn normalize(x: &Tensor, per_sample: bool) -> (Tensor, Vec<f32>, Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let hw = s.get(2).copied().unwrap_or(1) * s.get(3).copied().unwrap_or(1);
    let groups = if per_sample { n * c } else { c };
    let group_of = |plane: usize| if per_sample { plane } else { plane % c };
    let count = if per_sample { hw } else { n * hw } as f64;
    let mut mean = vec![0.0f64; groups];
    for (i, plane) in x.data().chunks(hw).enumerate() {
        mean[group_of(i)] += plane.iter().map(|&e| e as f64).sum::<f64>();
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0f64; groups];
    for (i, plane) in x.data().chunks(hw).enumerate() {
        let m = mean[group_of(i)];
        var[group_of(i)] += plane.iter().map(|&e| (e as f64 - m).powi(2)).sum::<f64>();
    }
    for v in &mut var {
        *v /= count;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v as f32 + NORM_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    for (i, plane) in xhat.data_mut().chunks_mut(hw).enumerate() {
        let gi = group_of(i);
        let m = mean[gi] as f32;
        for e in plane {
            *e = (*e - m) * inv_std[gi];
        }
    }
    let mean = mean.into_iter().map(|m| m as f32).collect();
    let var = var.into_iter().map(|v| v as f32).collect();
    (xhat, inv_std, mean, var)
}

fn norm_backward(
    gy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f32],
    gamma: Option<&[f32]>,
    per_sample: bool,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let s = gy.shape();
    let (n, c) = (s[0], s[1]);
    let hw = s.get(2).copied().unwrap_or(1) * s.get(3).copied().unwrap_or(1);
    let groups = if per_sample { n * c } else { c };
    let group_of = |plane: usize| if per_sample { plane } else { plane % c };
    let count = if per_sample { hw } else { n * hw } as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut sum_dxhat = vec![0.0f32; groups];
    let mut sum_dxhat_xhat = vec![0.0f32; groups];
    for (i, (gp, xp)) in gy.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
        let ch = i % c;
        let gi = group_of(i);
        let gm = gamma.map_or(1.0, |g| g[ch]);
        for (&g, &xh) in gp.iter().zip(xp) {
            dgamma[ch] += g * xh;
            dbeta[ch] += g;
            let d = g * gm;
            sum_dxhat[gi] += d;
            sum_dxhat_xhat[gi] += d * xh;
        }
    }
    let mut gx = gy.clone();
    for (i, (gp, xp)) in gx.data_mut().chunks_mut(hw).zip(xhat.data().chunks(hw)).enumerate() {
        let ch = i % c;
        let gi = group_of(i);
        let gm = gamma.map_or(1.0, |g| g[ch]);
        let k = inv_std[gi] / count;
        for (g, &xh) in gp.iter_mut().zip(xp) {
            let d = *g * gm;
            *g = k * (count * d - sum_dxhat[gi] - xh * sum_dxhat_xhat[gi]);
        }
    }
    (gx, dgamma, dbeta)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f32> {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out: &mut [f32]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(par: Parallelism, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, wc, k) = (w.dim(0), w.dim(1), w.dim(2));
    assert_eq!(c, wc, "conv channel mismatch: input {c}, weight {wc}");
    assert_eq!(k, w.dim(3), "only square kernels");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut out = vec![0.0; n * o * ho * wo];
    let in_len = c * h * wd;
    par.for_chunks(&mut out, o * ho * wo, |i, dst| {
        let cols = im2col(&x.data()[i * in_len..(i + 1) * in_len], c, h, wd, k, stride, pad);
        gemm(o, c * k * k, ho * wo, w.data(), false, &cols, false, dst, 0.0);
    });
    Tensor::from_vec(&[n, o, ho, wo], out)
}

fn conv2d_backward(par: Parallelism, x: &Tensor, w: &Tensor, gy: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let (ho, wo) = (gy.dim(2), gy.dim(3));
    let ckk = c * k * k;
    let in_len = c * h * wd;
    let out_len = o * ho * wo;
    let per_item: Vec<(Vec<f32>, Vec<f32>)> = par.map(n, |i| {
        let cols = im2col(&x.data()[i * in_len..(i + 1) * in_len], c, h, wd, k, stride, pad);
        let g = &gy.data()[i * out_len..(i + 1) * out_len];
        let mut gw = vec![0.0; o * ckk];
        gemm(o, ho * wo, ckk, g, false, &cols, true, &mut gw, 0.0);
        let mut gcols = vec![0.0; ckk * ho * wo];
        gemm(ckk, o, ho * wo, w.data(), true, g, false, &mut gcols, 0.0);
        let mut gx = vec![0.0; in_len];
        col2im(&gcols, c, h, wd, k, stride, pad, &mut gx);
        (gx, gw)
    });
    let mut gx = Vec::with_capacity(n * in_len);
    let mut gw = vec![0.0; o * ckk];
    for (gxi, gwi) in per_item {
        gx.extend_from_slice(&gxi);
        for (a, b) in gw.iter_mut().zip(&gwi) {
            *a += b;
        }
    }
    (Tensor::from_vec(x.shape(), gx), Tensor::from_vec(w.shape(), gw))
}
