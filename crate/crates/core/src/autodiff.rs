//! Tape-based reverse-mode differentiation over [`SeqTensor`] values.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and whatever it needs for the backward rule. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use diffseg::autodiff::Tape;
//! use diffseg::tensor::SeqTensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(SeqTensor::from_rows(&[[1.0, 2.0]]).unwrap());
//! let w = tape.leaf(SeqTensor::from_rows(&[[1.0], [1.0]]).unwrap());
//! let y = tape.linear(x, w, None).unwrap();
//! assert_eq!(tape.value(y).data(), &[3.0]);
//!
//! let grads = tape.backward(y, SeqTensor::filled(&[1, 1], 1.0)).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
//! ```

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::SeqTensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    DepthwiseConv {
        x: Var,
        k: Var,
        dilation: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanTime {
        x: Var,
    },
    BroadcastTime {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    FrameMask {
        x: Var,
        mask: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    Concat {
        a: Var,
        b: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::DepthwiseConv { x, k, .. } => vec![*x, *k],
            Op::MaxPool { x, .. }
            | Op::MeanTime { x }
            | Op::BroadcastTime { x }
            | Op::Relu { x }
            | Op::FrameMask { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => vec![*a, *b],
            Op::InstanceNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: SeqTensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<SeqTensor>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&SeqTensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<SeqTensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recorded computation: nodes in evaluation (topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_matrix(t: &SeqTensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return dim_err(format!("{what} must be rank 2, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: SeqTensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: SeqTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: SeqTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &SeqTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `y[t] = x[t]·W + b` for `x: [L, Cin]`, `W: [Cin, Cout]`, `b: [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (l, cin) = check_matrix(self.value(x), "linear input")?;
        let (win, cout) = check_matrix(self.value(w), "linear weight")?;
        if cin != win {
            return dim_err(format!("linear: input width {cin} vs weight rows {win}"));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return dim_err(format!("linear: bias length {} vs {cout}", self.value(b).len()));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; l * cout];
        if let Some(b) = b {
            let bs = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bs);
            }
        }
        for t in 0..l {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for i in 0..cin {
                let xv = xs[t * cin + i];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &ws[i * cout..(i + 1) * cout];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let value = SeqTensor::matrix(l, cout, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Per-channel dilated convolution with zero "same" padding.
    ///
    /// `k` is `[w, C]` with odd `w`; tap `j` reads frame `t + (j - (w-1)/2)·dilation`.
    pub fn depthwise_conv1d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (l, c) = check_matrix(self.value(x), "conv input")?;
        let (w, kc) = check_matrix(self.value(k), "conv kernel")?;
        if w % 2 == 0 {
            return config_err(format!("conv kernel width must be odd, got {w}"));
        }
        if dilation == 0 {
            return config_err("dilation must be positive");
        }
        if kc != c {
            return dim_err(format!("conv: kernel channels {kc} vs input {c}"));
        }
        let xs = self.value(x).data();
        let ks = self.value(k).data();
        let half = (w / 2) as isize;
        let mut out = vec![0.0; l * c];
        for j in 0..w {
            let off = (j as isize - half) * dilation as isize;
            let krow = &ks[j * c..(j + 1) * c];
            for t in 0..l {
                let src = t as isize + off;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                let orow = &mut out[t * c..(t + 1) * c];
                let xrow = &xs[src * c..(src + 1) * c];
                for ((o, xv), kv) in orow.iter_mut().zip(xrow).zip(krow) {
                    *o += xv * kv;
                }
            }
        }
        let value = SeqTensor::matrix(l, c, out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, k, dilation }))
    }

    /// Stride-1 max pooling with −∞ padding. Ties resolve to the earliest frame.
    pub fn maxpool1d_same(&mut self, x: Var, window: usize) -> Result<Var> {
        if window.is_multiple_of(2) {
            return config_err(format!("pool window must be odd, got {window}"));
        }
        let (l, c) = check_matrix(self.value(x), "pool input")?;
        let xs = self.value(x).data();
        let half = window / 2;
        let mut out = vec![0.0; l * c];
        let mut argmax = vec![0usize; l * c];
        for t in 0..l {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(l - 1);
            for ch in 0..c {
                let mut best = lo * c + ch;
                for s in lo + 1..=hi {
                    let idx = s * c + ch;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out[t * c + ch] = xs[best];
                argmax[t * c + ch] = best;
            }
        }
        let value = SeqTensor::matrix(l, c, out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Per-channel mean over time: `[L, C] -> [1, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let (l, c) = check_matrix(self.value(x), "pool input")?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in xs.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / l as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = SeqTensor::matrix(1, c, out)?;
        Ok(self.push(value, Op::MeanTime { x }))
    }

    /// Repeats a single frame (`[1, C]` or `[C]`) `frames` times.
    pub fn broadcast_time(&mut self, x: Var, frames: usize) -> Result<Var> {
        let xv = self.value(x);
        let single = matches!(xv.shape(), [_] | [1, _]);
        if !single {
            return dim_err(format!("broadcast expects one frame, got {:?}", xv.shape()));
        }
        let c = xv.len();
        let mut out = Vec::with_capacity(frames * c);
        for _ in 0..frames {
            out.extend_from_slice(xv.data());
        }
        let value = SeqTensor::matrix(frames, c, out)?;
        Ok(self.push(value, Op::BroadcastTime { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = SeqTensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = SeqTensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Multiplies frame `t` of `x` by `mask[t]` across all channels.
    pub fn frame_mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (l, c) = check_matrix(self.value(x), "mask input")?;
        if mask.len() != l {
            return dim_err(format!("mask length {} vs {l} frames", mask.len()));
        }
        let mut data = self.value(x).data().to_vec();
        for (row, &m) in data.chunks_mut(c).zip(mask) {
            row.iter_mut().for_each(|v| *v *= m);
        }
        let value = SeqTensor::matrix(l, c, data)?;
        Ok(self.push(value, Op::FrameMask { x, mask: mask.to_vec() }))
    }

    /// Per-channel standardization over time followed by `gain·x̂ + bias`.
    ///
    /// With a single frame the variance is zero and the output equals `bias`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (l, c) = check_matrix(self.value(x), "norm input")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return dim_err("instance norm affine parameters must match channels");
        }
        if eps <= 0.0 {
            return config_err("instance norm eps must be positive");
        }
        if l == 1 {
            log::warn!("instance norm over a single frame; output reduces to bias");
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut mean = vec![0.0; c];
        for row in xs.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= l as f64);
        let mut var = vec![0.0; c];
        for row in xs.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / l as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; l * c];
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let i = t * c + ch;
                let h = (xs[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gs[ch] * h + bs[ch];
            }
        }
        let value = SeqTensor::matrix(l, c, out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax over channels.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (l, c) = check_matrix(self.value(x), "softmax input")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = SeqTensor::matrix(l, c, data)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Row-wise log-softmax over channels.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (l, c) = check_matrix(self.value(x), "log_softmax input")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = SeqTensor::matrix(l, c, data)?;
        Ok(self.push(value, Op::LogSoftmax { x }))
    }

    /// `softmax(QKᵀ/√d)V` per head, where `d = H / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, h) = check_matrix(self.value(q), "attention query")?;
        let (lk, hk) = check_matrix(self.value(k), "attention key")?;
        let (lv, hv) = check_matrix(self.value(v), "attention value")?;
        if hk != h || hv != h || lk != lv {
            return dim_err(format!("attention shapes q[{lq}x{h}] k[{lk}x{hk}] v[{lv}x{hv}]"));
        }
        if heads == 0 || h % heads != 0 {
            return config_err(format!("{heads} heads do not divide width {h}"));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut weights = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * h];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..lq {
                let qi = &qs[i * h + off..i * h + off + dh];
                let wrow = &mut weights[(hd * lq + i) * lk..(hd * lq + i + 1) * lk];
                for (j, w) in wrow.iter_mut().enumerate() {
                    let kj = &ks[j * h + off..j * h + off + dh];
                    *w = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(wrow);
                let orow = &mut out[i * h + off..i * h + off + dh];
                for (j, &w) in wrow.iter().enumerate() {
                    let vj = &vs[j * h + off..j * h + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        let value = SeqTensor::matrix(lq, h, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        ))
    }

    /// `[L, A] ++ [L, B] -> [L, A + B]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, ca) = check_matrix(self.value(a), "concat lhs")?;
        let (lb, cb) = check_matrix(self.value(b), "concat rhs")?;
        if la != lb {
            return dim_err(format!("concat: {la} vs {lb} frames"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(la * (ca + cb));
        for t in 0..la {
            out.extend_from_slice(&ad[t * ca..(t + 1) * ca]);
            out.extend_from_slice(&bd[t * cb..(t + 1) * cb]);
        }
        let value = SeqTensor::matrix(la, ca + cb, out)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to `root`)
    /// back to every node that requires a gradient.
    pub fn backward(&self, root: Var, seed: SeqTensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return dim_err(format!(
                "seed {:?} vs root {:?}",
                seed.shape(),
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| SeqTensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape matches node"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr) => {
                grad_buf(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (l, cin) = (xv.shape()[0], xv.shape()[1]);
                let cout = wv.shape()[1];
                if self.wants(*x) {
                    let dx = acc!(*x);
                    let ws = wv.data();
                    for t in 0..l {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for i in 0..cin {
                            let wrow = &ws[i * cout..(i + 1) * cout];
                            dx[t * cin + i] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = acc!(*w);
                    let xs = xv.data();
                    for t in 0..l {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for i in 0..cin {
                            let xval = xs[t * cin + i];
                            if xval == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[i * cout..(i + 1) * cout];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += xval * gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = acc!(*b);
                        for grow in g.chunks(cout) {
                            for (d, gv) in db.iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, k, dilation } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let (l, c) = (xv.shape()[0], xv.shape()[1]);
                let w = kv.shape()[0];
                let half = (w / 2) as isize;
                if self.wants(*x) {
                    let dx = acc!(*x);
                    let ks = kv.data();
                    for j in 0..w {
                        let off = (j as isize - half) * *dilation as isize;
                        for t in 0..l {
                            let src = t as isize + off;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                dx[src * c + ch] += ks[j * c + ch] * g[t * c + ch];
                            }
                        }
                    }
                }
                if self.wants(*k) {
                    let dk = acc!(*k);
                    let xs = xv.data();
                    for j in 0..w {
                        let off = (j as isize - half) * *dilation as isize;
                        for t in 0..l {
                            let src = t as isize + off;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                dk[j * c + ch] += xs[src * c + ch] * g[t * c + ch];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let dx = acc!(*x);
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                }
            }
            Op::MeanTime { x } => {
                if self.wants(*x) {
                    let l = self.value(*x).shape()[0];
                    let inv = 1.0 / l as f64;
                    let dx = acc!(*x);
                    for row in dx.chunks_mut(g.len()) {
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::BroadcastTime { x } => {
                if self.wants(*x) {
                    let dx = acc!(*x);
                    let c = dx.len();
                    for row in g.chunks(c) {
                        for (d, gv) in dx.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xs = self.value(*x).data();
                    let dx = acc!(*x);
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = acc!(v);
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bs = self.value(*b).data();
                    let d = acc!(*a);
                    for ((d, gv), bv) in d.iter_mut().zip(g).zip(bs) {
                        *d += gv * bv;
                    }
                }
                if self.wants(*b) {
                    let as_ = self.value(*a).data();
                    let d = acc!(*b);
                    for ((d, gv), av) in d.iter_mut().zip(g).zip(as_) {
                        *d += gv * av;
                    }
                }
            }
            Op::FrameMask { x, mask } => {
                if self.wants(*x) {
                    let c = self.value(*x).shape()[1];
                    let dx = acc!(*x);
                    for ((drow, grow), &m) in dx.chunks_mut(c).zip(g.chunks(c)).zip(mask) {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv * m;
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (l, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let gs = self.value(*gain).data();
                if self.wants(*gain) {
                    let d = acc!(*gain);
                    for i in 0..l * c {
                        d[i % c] += g[i] * xhat[i];
                    }
                }
                if self.wants(*bias) {
                    let d = acc!(*bias);
                    for i in 0..l * c {
                        d[i % c] += g[i];
                    }
                }
                if self.wants(*x) {
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dx = vec![0.0; c];
                    for i in 0..l * c {
                        let dh = g[i] * gs[i % c];
                        sum_d[i % c] += dh;
                        sum_dx[i % c] += dh * xhat[i];
                    }
                    let n = l as f64;
                    let dx = acc!(*x);
                    for i in 0..l * c {
                        let ch = i % c;
                        let dh = g[i] * gs[ch];
                        dx[i] += inv_std[ch] / n * (n * dh - sum_d[ch] - xhat[i] * sum_dx[ch]);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let dx = acc!(*x);
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let dx = acc!(*x);
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * s;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (lq, h) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let lk = self.value(*k).shape()[0];
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qs = self.value(*q).data();
                let ks = self.value(*k).data();
                let vs = self.value(*v).data();
                let mut dq = vec![0.0; lq * h];
                let mut dk = vec![0.0; lk * h];
                let mut dv = vec![0.0; lk * h];
                let mut ds = vec![0.0; lk];
                for hd in 0..*heads {
                    let off = hd * dh;
                    for i in 0..lq {
                        let arow = &weights[(hd * lq + i) * lk..(hd * lq + i + 1) * lk];
                        let gi = &g[i * h + off..i * h + off + dh];
                        let mut dot = 0.0;
                        for j in 0..lk {
                            let vj = &vs[j * h + off..j * h + off + dh];
                            let da: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = da;
                            dot += arow[j] * da;
                            let dvj = &mut dv[j * h + off..j * h + off + dh];
                            for (d, gv) in dvj.iter_mut().zip(gi) {
                                *d += arow[j] * gv;
                            }
                        }
                        for j in 0..lk {
                            let s = arow[j] * (ds[j] - dot) * scale;
                            if s == 0.0 {
                                continue;
                            }
                            for d in 0..dh {
                                dq[i * h + off + d] += s * ks[j * h + off + d];
                                dk[j * h + off + d] += s * qs[i * h + off + d];
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        let d = acc!(var);
                        d.iter_mut().zip(&buf).for_each(|(d, b)| *d += b);
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let w = ca + cb;
                if self.wants(*a) {
                    let d = acc!(*a);
                    for (drow, grow) in d.chunks_mut(ca).zip(g.chunks(w)) {
                        for (dv, gv) in drow.iter_mut().zip(&grow[..ca]) {
                            *dv += gv;
                        }
                    }
                }
                if self.wants(*b) {
                    let d = acc!(*b);
                    for (drow, grow) in d.chunks_mut(cb).zip(g.chunks(w)) {
                        for (dv, gv) in drow.iter_mut().zip(&grow[ca..]) {
                            *dv += gv;
                        }
                    }
                }
            }
        }
    }

    /// Checks the topological-order invariant of the record.
    pub fn verify_order(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(Error::Invalid(format!("node {i} precedes one of its inputs")));
            }
        }
        Ok(())
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
