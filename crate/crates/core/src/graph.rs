//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.

use std::collections::BTreeMap;

use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv2d { x: Var, w: Var, b: Option<Var>, dilation: usize },
    Relu(Var),
    AvgPool { x: Var, k: usize, stride: usize },
    AdaptiveAvgPool(Var),
    Upsample { x: Var, factor: usize },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Var },
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Dot { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen_prefixes: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with `prefix` enter the graph as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::UntrainedModel(format!("missing parameter `{name}`")))?
            .clone();
        let trainable = !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        Ok(self.push(t, Op::Param(name.to_string()), trainable))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).check_nchw("conv2d input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d weight {ws:?}")));
        }
        if ws[1] != c_in {
            return Err(Error::ChannelMismatch(format!(
                "conv2d expects {} input channels, got {c_in}",
                ws[1]
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::ShapeMismatch(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom { n, c_in, c_out: ws[0], h, w: wd, k: ws[2], dilation };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[n, ws[0], h, wd], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, dilation }, rg))
    }

    /// Rectifier. NaN passes through so that a poisoned input still shows
    /// up in the loss.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).check_nchw("avg_pool")?;
        let (oh, ow) = (kernels::pool_out(h, k, stride), kernels::pool_out(w, k, stride));
        if oh == 0 || ow == 0 {
            return Err(Error::TooSmall(format!("{h}x{w} input to a {k}x{k} pool")));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, k, stride);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::AvgPool { x, k, stride }, rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).check_nchw("adaptive_avg_pool")?;
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(Error::TooSmall(format!("adaptive pool {h}x{w} -> {oh}x{ow}")));
        }
        let out = kernels::adaptive_avg_pool_forward(self.value(x).data(), n * c, h, w, oh, ow);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::AdaptiveAvgPool(x), rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).check_nchw("upsample")?;
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_nearest_forward(self.value(x).data(), n * c, h, w, factor);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[n, c, h * factor, w * factor], out)?,
            Op::Upsample { x, factor },
            rg,
        ))
    }

    /// Channel-wise concatenation of `(N, C_i, H, W)` tensors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).check_nchw("concat")?;
        let mut c_total = 0;
        for &v in xs {
            let (n2, c2, h2, w2) = self.value(v).check_nchw("concat")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(v)
                )));
            }
            c_total += c2;
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let plane = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[b * plane..(b + 1) * plane]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&[n, c_total, h, w], data)?, Op::Concat(xs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Fully connected layer on the flattened trailing dims: `(N, ...) -> (N, out)`.
    /// `w` is `(out, in)`, `b` is `(out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = xs[0];
        let d: usize = xs[1..].iter().product();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != d {
            return Err(Error::ShapeMismatch(format!(
                "linear: weight {ws:?} vs flattened input width {d}"
            )));
        }
        let out_dim = ws[0];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        if bv.len() != out_dim {
            return Err(Error::ShapeMismatch(format!("linear bias {:?}", self.shape(b))));
        }
        let mut out = Vec::with_capacity(n * out_dim);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            for o in 0..out_dim {
                let wr = &wv[o * d..(o + 1) * d];
                out.push(bv[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, out_dim], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Mean squared error over all elements; a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// Softmax cross-entropy of `(N, K)` logits against class indices, mean over the batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: logits {s:?} with {} targets",
                targets.len()
            )));
        }
        let k = s[1];
        let lv = self.value(logits).data();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &lv[i * k..(i + 1) * k];
                log_sum_exp(row) - row[t]
            })
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / targets.len() as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            rg,
        ))
    }

    /// `sum(x * weights)`; a scalar projection used for gradient probing.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.value(x).same_shape(&weights)?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, rg))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        // A parameter may enter the tape more than once; its gradient is the sum.
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Param(name) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let acc = params
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(node.value.shape()));
            if let Some(g) = &grads[i] {
                acc.add_assign(g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, dilation } => {
                let (n, c_in, h, wd) = self.value(*x).dims4();
                let ws = self.shape(*w);
                let geom = ConvGeom { n, c_in, c_out: ws[0], h, w: wd, k: ws[2], dilation: *dilation };
                let mut dx = self.rg(*x).then(|| Tensor::zeros(self.shape(*x)));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(ws));
                let mut db = b.filter(|b| self.rg(*b)).map(|b| Tensor::zeros(self.shape(b)));
                kernels::conv2d_backward(
                    &geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let g = gy.zip_map(&node.value, |g, y| if y > 0.0 { g } else { 0.0 }).unwrap();
                self.acc(grads, *x, g);
            }
            Op::AvgPool { x, k, stride } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::avg_pool_backward(gy.data(), dx.data_mut(), n * c, h, w, *k, *stride);
                self.acc(grads, *x, dx);
            }
            Op::AdaptiveAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, oh, ow) = node.value.dims4();
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::adaptive_avg_pool_backward(gy.data(), dx.data_mut(), n * c, h, w, oh, ow);
                self.acc(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::upsample_nearest_backward(gy.data(), dx.data_mut(), n * c, h, w, *factor);
                self.acc(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let (n, c_total, h, w) = node.value.dims4();
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(n * c * h * w);
                        for b in 0..n {
                            let start = (b * c_total + offset) * h * w;
                            data.extend_from_slice(&gy.data()[start..start + c * h * w]);
                        }
                        self.acc(grads, v, Tensor::new(self.shape(v), data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|v| -v));
            }
            Op::Scale(x, c) => self.acc(grads, *x, gy.map(|v| v * c)),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let n = xs[0];
                let d: usize = xs[1..].iter().product();
                let out_dim = self.shape(*w)[0];
                let (xv, wv, g) = (self.value(*x).data(), self.value(*w).data(), gy.data());
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let row = &mut dx[i * d..(i + 1) * d];
                        for o in 0..out_dim {
                            let go = g[i * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (r, wv) in row.iter_mut().zip(&wv[o * d..(o + 1) * d]) {
                                *r += go * wv;
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(xs, dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_dim * d];
                    for i in 0..n {
                        let row = &xv[i * d..(i + 1) * d];
                        for o in 0..out_dim {
                            let go = g[i * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (dwv, r) in dw[o * d..(o + 1) * d].iter_mut().zip(row) {
                                *dwv += go * r;
                            }
                        }
                    }
                    self.acc(grads, *w, Tensor::new(&[out_dim, d], dw).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; out_dim];
                    for i in 0..n {
                        for o in 0..out_dim {
                            db[o] += g[i * out_dim + o];
                        }
                    }
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db).unwrap());
                }
            }
            Op::Mse(a, b) => {
                let scale = 2.0 * gy.item() / self.value(*a).len() as f64;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * scale).unwrap();
                if self.rg(*b) {
                    self.acc(grads, *b, diff.map(|v| -v));
                }
                self.acc(grads, *a, diff);
            }
            Op::CrossEntropy { logits, targets } => {
                let s = self.shape(*logits);
                let k = s[1];
                let scale = gy.item() / targets.len() as f64;
                let lv = self.value(*logits).data();
                let mut d = Vec::with_capacity(lv.len());
                for (i, &t) in targets.iter().enumerate() {
                    let row = &lv[i * k..(i + 1) * k];
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        d.push((p - if j == t { 1.0 } else { 0.0 }) * scale);
                    }
                }
                self.acc(grads, *logits, Tensor::new(s, d).unwrap());
            }
            Op::Dot { x, weights } => {
                let g = gy.item();
                self.acc(grads, *x, weights.map(|v| v * g));
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a node, if it required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter that entered the graph.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
