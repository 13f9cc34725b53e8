//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so reverse creation
//! order is a valid topological order for the backward sweep. Only nodes that
//! depend on a leaf created with `requires_grad` receive gradients; frozen
//! parameters and data inputs cost nothing in the backward pass.

use rand::Rng as _;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvDims, View};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower/upper probability clip applied before taking logarithms.
pub const PROB_CLIP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
        time: usize,
    },
    Bce {
        p: Var,
        y: Var,
    },
    Cce {
        p: Var,
        y: Var,
    },
    L2 {
        params: Vec<Var>,
        beta: f64,
    },
    Mse {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<Var>,
        weights: Vec<f64>,
    },
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    PadTime {
        x: Var,
        left: usize,
        right: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Data input that never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies the accumulated gradient into the stored tensor's gradient slot and
    /// returns the tensor.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = &self.nodes[v.0].grad {
            t.set_grad(g.clone())
                .expect("gradient length matches value");
        }
        t
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| !v.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::new(shape, data).expect("shape preserved"), op, rg)
    }

    /// Valid (unpadded), stride-1 convolution.
    ///
    /// `x: [B, N, Cin]`, `w: [K, Cin, Cout]`, `b: [Cout]` gives `[B, N-K+1, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let [batch, len, cin] = *xs else {
            return Err(shape_err!("conv1d input must be [B, N, C], got {xs:?}"));
        };
        let [k, wcin, cout] = *ws else {
            return Err(shape_err!(
                "conv1d kernel must be [K, Cin, Cout], got {ws:?}"
            ));
        };
        if wcin != cin {
            return Err(shape_err!(
                "conv1d kernel expects {wcin} input channels, input has {cin}"
            ));
        }
        if bs != [cout] {
            return Err(shape_err!("conv1d bias must be [{cout}], got {bs:?}"));
        }
        if len < k {
            return Err(shape_err!(
                "conv1d input length {len} is shorter than kernel {k}"
            ));
        }
        let dims = ConvDims {
            batch,
            len,
            cin,
            k,
            cout,
        };
        let out = kernels::conv1d_forward(self.data(x), self.data(w), self.data(b), dims);
        let rg = self.any_grad(&[x, w, b]);
        let value = Tensor::new(vec![batch, dims.out_len(), cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, dims }, rg))
    }

    /// `x: [B, D] @ w: [D, H] + b: [H]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let [batch, din] = *xs else {
            return Err(shape_err!("dense input must be [B, D], got {xs:?}"));
        };
        let [wd, h] = *ws else {
            return Err(shape_err!("dense weight must be [D, H], got {ws:?}"));
        };
        if wd != din || bs != [h] {
            return Err(shape_err!(
                "dense shapes do not line up: x {xs:?}, w {ws:?}, b {bs:?}"
            ));
        }
        let mut out = Vec::with_capacity(batch * h);
        for _ in 0..batch {
            out.extend_from_slice(self.data(b));
        }
        kernels::gemm(
            1.0,
            self.data(x),
            View::dense(batch, din),
            self.data(w),
            View::dense(din, h),
            1.0,
            &mut out,
            View::dense(batch, h),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, h], out)?, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.unary(x, data, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        self.unary(x, data, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(invalid!(
                "softmax axis {axis} out of range for shape {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis_len + a) * inner + i;
                let max = (0..axis_len)
                    .map(|a| src[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..axis_len {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..axis_len {
                    out[idx(a)] /= total;
                }
            }
        }
        Ok(self.unary(
            x,
            out,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity when
    /// `training` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid!("dropout rate must lie in [0, 1), got {rate}"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.unary(x, data, Op::Dropout { x, mask }))
    }

    /// Maximum over the time axis: `[B, T, C] -> [B, C]`. Ties resolve to the
    /// earliest time step.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [batch, time, ch] = *self.shape(x) else {
            return Err(shape_err!(
                "global max pool expects [B, T, C], got {:?}",
                self.shape(x)
            ));
        };
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; batch * ch];
        let mut argmax = vec![0usize; batch * ch];
        for b in 0..batch {
            for t in 0..time {
                let row = &src[(b * time + t) * ch..(b * time + t + 1) * ch];
                for (c, &v) in row.iter().enumerate() {
                    if v > out[b * ch + c] {
                        out[b * ch + c] = v;
                        argmax[b * ch + c] = t;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(vec![batch, ch], out)?,
            Op::GlobalMaxPool { x, argmax, time },
            rg,
        ))
    }

    /// Mean binary cross-entropy over all elements.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var> {
        if self.shape(p) != self.shape(y) {
            return Err(shape_err!(
                "bce shapes differ: {:?} vs {:?}",
                self.shape(p),
                self.shape(y)
            ));
        }
        let m = self.data(p).len() as f64;
        let total: f64 = self
            .data(p)
            .iter()
            .zip(self.data(y))
            .map(|(&p, &y)| {
                let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
            })
            .sum();
        let rg = self.any_grad(&[p, y]);
        Ok(self.push(Tensor::scalar(-total / m), Op::Bce { p, y }, rg))
    }

    /// Categorical cross-entropy of `p: [B, n]` against one-hot rows, averaged over `B`.
    pub fn cce(&mut self, p: Var, y: Var) -> Result<Var> {
        let ps = self.shape(p);
        if ps.len() != 2 || ps != self.shape(y) {
            return Err(shape_err!(
                "cce expects matching [B, n] shapes, got {ps:?} vs {:?}",
                self.shape(y)
            ));
        }
        let m = ps[0] as f64;
        let total: f64 = self
            .data(p)
            .iter()
            .zip(self.data(y))
            .filter(|(_, &y)| y != 0.0)
            .map(|(&p, &y)| y * p.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln())
            .sum();
        let rg = self.any_grad(&[p, y]);
        Ok(self.push(Tensor::scalar(-total / m), Op::Cce { p, y }, rg))
    }

    /// `beta * sum(theta^2)` over the given tensors.
    pub fn l2_penalty(&mut self, params: &[Var], beta: f64) -> Var {
        let total: f64 = params.iter().map(|&v| self.value(v).sum_sq()).sum();
        let rg = self.any_grad(params);
        self.push(
            Tensor::scalar(beta * total),
            Op::L2 {
                params: params.to_vec(),
                beta,
            },
            rg,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "mse shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let n = self.data(a).len() as f64;
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { a, b }, rg))
    }

    /// `sum_i weights[i] * terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(invalid!("weighted sum needs one weight per term"));
        }
        let mut total = 0.0;
        for (&t, &w) in terms.iter().zip(weights) {
            total += w * self.value(t).item()?;
        }
        let rg = self.any_grad(terms);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_sum(&[a, b], &[1.0, 1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Zero-pads the time axis of `[B, T, C]`.
    pub fn pad_time(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let [batch, time, ch] = *self.shape(x) else {
            return Err(shape_err!(
                "pad_time expects [B, T, C], got {:?}",
                self.shape(x)
            ));
        };
        let out_t = time + left + right;
        let src = self.data(x);
        let mut out = vec![0.0; batch * out_t * ch];
        for b in 0..batch {
            out[(b * out_t + left) * ch..(b * out_t + left + time) * ch]
                .copy_from_slice(&src[b * time * ch..(b + 1) * time * ch]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(vec![batch, out_t, ch], out)?,
            Op::PadTime { x, left, right },
            rg,
        ))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(invalid!(
                "row range {start}..{end} invalid for shape {shape:?}"
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut new_shape = shape.to_vec();
        new_shape[0] = end - start;
        let data = self.data(x)[start * inner..end * inner].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(new_shape, data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`, adding `d loss / d node` into the
    /// gradient of every node that requires one. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            self.propagate(i, &go, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&go).for_each(|(a, g)| *a += g),
                None => node.grad = Some(go),
            }
        }
        if self
            .nodes
            .iter()
            .filter_map(|n| n.grad.as_ref())
            .flatten()
            .any(|g| !g.is_finite())
        {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(())
    }

    fn propagate(&self, i: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, dims } => {
                let xd = nodes[x.0].value.data();
                if nodes[w.0].requires_grad || nodes[b.0].requires_grad {
                    let mut gw = vec![0.0; nodes[w.0].value.len()];
                    let mut gb = vec![0.0; dims.cout];
                    kernels::conv1d_backward_params(xd, go, *dims, &mut gw, &mut gb);
                    if let Some(s) = slot(nodes, grads, *w) {
                        add_into(s, &gw);
                    }
                    if let Some(s) = slot(nodes, grads, *b) {
                        add_into(s, &gb);
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    kernels::conv1d_backward_input(nodes[w.0].value.data(), go, *dims, s);
                }
            }
            Op::Dense { x, w, b } => {
                let [batch, din] = *nodes[x.0].value.shape() else {
                    unreachable!()
                };
                let h = nodes[b.0].value.len();
                if let Some(s) = slot(nodes, grads, *x) {
                    let wd = nodes[w.0].value.data();
                    kernels::gemm(
                        1.0,
                        go,
                        View::dense(batch, h),
                        wd,
                        View::dense(din, h).t(),
                        1.0,
                        s,
                        View::dense(batch, din),
                    );
                }
                if let Some(s) = slot(nodes, grads, *w) {
                    let xd = nodes[x.0].value.data();
                    kernels::gemm(
                        1.0,
                        xd,
                        View::dense(batch, din).t(),
                        go,
                        View::dense(batch, h),
                        1.0,
                        s,
                        View::dense(din, h),
                    );
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for row in go.chunks_exact(h) {
                        add_into(s, row);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((acc, &g), &y) in s.iter_mut().zip(go).zip(out) {
                        if y > 0.0 {
                            *acc += g;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((acc, &g), &y) in s.iter_mut().zip(go).zip(out) {
                        *acc += g * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let idx = |a: usize| (o * axis_len + a) * inner + j;
                            let dot: f64 = (0..*axis_len).map(|a| go[idx(a)] * out[idx(a)]).sum();
                            for a in 0..*axis_len {
                                s[idx(a)] += out[idx(a)] * (go[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((acc, &g), &m) in s.iter_mut().zip(go).zip(mask) {
                        *acc += g * m;
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax, time } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let ch = nodes[i].value.shape()[1];
                    for (idx, (&g, &t)) in go.iter().zip(argmax).enumerate() {
                        let (b, c) = (idx / ch, idx % ch);
                        s[(b * time + t) * ch + c] += g;
                    }
                }
            }
            Op::Bce { p, y } => {
                let (pd, yd) = (nodes[p.0].value.data(), nodes[y.0].value.data());
                let m = pd.len() as f64;
                if let Some(s) = slot(nodes, grads, *p) {
                    for ((acc, &p), &y) in s.iter_mut().zip(pd).zip(yd) {
                        if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
                            *acc -= go[0] * (y / p - (1.0 - y) / (1.0 - p)) / m;
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *y) {
                    for ((acc, &p), _) in s.iter_mut().zip(pd).zip(yd) {
                        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                        *acc -= go[0] * (pc.ln() - (1.0 - pc).ln()) / m;
                    }
                }
            }
            Op::Cce { p, y } => {
                let (pd, yd) = (nodes[p.0].value.data(), nodes[y.0].value.data());
                let m = nodes[p.0].value.shape()[0] as f64;
                if let Some(s) = slot(nodes, grads, *p) {
                    for ((acc, &p), &y) in s.iter_mut().zip(pd).zip(yd) {
                        if y != 0.0 && p > PROB_CLIP && p < 1.0 - PROB_CLIP {
                            *acc -= go[0] * y / p / m;
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *y) {
                    for (acc, &p) in s.iter_mut().zip(pd) {
                        *acc -= go[0] * p.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln() / m;
                    }
                }
            }
            Op::L2 { params, beta } => {
                for &v in params {
                    let vd = nodes[v.0].value.data();
                    if let Some(s) = slot(nodes, grads, v) {
                        for (acc, &t) in s.iter_mut().zip(vd) {
                            *acc += go[0] * 2.0 * beta * t;
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = ad.len() as f64;
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((acc, &x), &y) in s.iter_mut().zip(ad).zip(bd) {
                        *acc += go[0] * 2.0 * (x - y) / n;
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for ((acc, &x), &y) in s.iter_mut().zip(ad).zip(bd) {
                        *acc -= go[0] * 2.0 * (x - y) / n;
                    }
                }
            }
            Op::WeightedSum { terms, weights } => {
                for (&t, &w) in terms.iter().zip(weights) {
                    if let Some(s) = slot(nodes, grads, t) {
                        s[0] += go[0] * w;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((acc, &g), &y) in s.iter_mut().zip(go).zip(bd) {
                        *acc += g * y;
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for ((acc, &g), &x) in s.iter_mut().zip(go).zip(ad) {
                        *acc += g * x;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().for_each(|acc| *acc += go[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    add_into(s, go);
                }
            }
            Op::PadTime { x, left, right } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let [batch, time, ch] = *nodes[x.0].value.shape() else {
                        unreachable!()
                    };
                    let out_t = time + left + right;
                    for b in 0..batch {
                        let src = &go[(b * out_t + left) * ch..(b * out_t + left + time) * ch];
                        add_into(&mut s[b * time * ch..(b + 1) * time * ch], src);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                    add_into(&mut s[start * inner..start * inner + go.len()], go);
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 5, 1]));
        let w = g.param(Tensor::ones(&[3, 1, 1]));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn conv_impulse_kernel_truncates_input() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 1.0).collect();
        let x = g.input(t(&[1, 6, 2], &xs));
        // w[k, c, o] = 1 iff k == 0 and c == o
        let mut w = Tensor::zeros(&[3, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = g.param(w);
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &xs[..8]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 2, 1]));
        let w = g.param(Tensor::ones(&[3, 1, 1]));
        let b = g.param(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, w, b), Err(Error::Shape(_))));
        let w2 = g.param(Tensor::ones(&[1, 2, 1]));
        assert!(matches!(g.conv1d(x, w2, b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_softmax_pool_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = g.input(Tensor::filled(&[2, 5], 3.7));
        let s = g.softmax(c, 1).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let p = g.input(t(&[1, 3, 2], &[1.0, 5.0, 3.0, 2.0, 4.0, 4.0]));
        let m = g.global_max_pool(p).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0]);
    }

    #[test]
    fn dropout_inference_is_identity_and_rate_checked() {
        let mut g = Graph::new();
        let mut rng = rng_from(0);
        let x = g.input(Tensor::ones(&[10]));
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut g = Graph::new();
        let vals = [1.0, -2.0, 3.0, 0.5];
        let x = g.param(t(&[4], &vals));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.weighted_sum(&[s], &[0.5]).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), &vals);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 4, 1]));
        let w = g.leaf(Tensor::ones(&[2, 1, 1]), false);
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(b).unwrap(), &[3.0]);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.input(Tensor::filled(&[6], 0.5));
        let y = g.input(t(&[6], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let l = g.bce(p, y).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cce_of_onehot_is_near_zero() {
        let mut g = Graph::new();
        let oh = t(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let p = g.input(oh.clone());
        let y = g.input(oh);
        let l = g.cce(p, y).unwrap();
        let v = g.value(l).item().unwrap();
        assert!((0.0..=1e-6).contains(&v), "{v}");
        let bad = g.input(Tensor::ones(&[2, 2]));
        assert!(g.cce(bad, y).is_err());
    }
}
