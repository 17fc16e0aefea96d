//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! walks the tape in reverse. Parameters are bound by name from a
//! [`ParamStore`]: binding the same name twice yields the same node, so a
//! tensor shared by two subnetworks accumulates gradient from both uses.
//! The set of bound names is kept, which lets callers assert exactly which
//! subnetworks a forward pass touched.

use std::collections::BTreeMap;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    LogClamped {
        x: Var,
        floor: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    KlStdNormal {
        mu: Var,
        logvar: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Free variable that receives gradient (used by tests and probes).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies `v`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter bound so far, sorted.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).shape();
        let [co, ci, k, k2] = self.value(w).shape();
        if ci != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} vs kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(b) = b {
            self.value(b).ensure_shape([1, co, 1, 1], "conv2d bias")?;
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {k} does not fit {h}x{wd}")))?;
        let plane = geom.col_rows() * geom.col_cols();
        let mut cols = vec![T::zero(); n * plane];
        let mut out = Tensor::zeros([n, co, geom.out_h, geom.out_w]);
        let per_out = co * geom.col_cols();
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                conv::conv2d_forward(
                    xv.sample(i),
                    &geom,
                    wv,
                    bv,
                    co,
                    &mut cols[i * plane..(i + 1) * plane],
                    &mut out.data_mut()[i * per_out..(i + 1) * per_out],
                );
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    /// Transposed convolution; `w` is `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).shape();
        let [ci, co, k, k2] = self.value(w).shape();
        if ci != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input {:?} vs kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(b) = b {
            self.value(b).ensure_shape([1, co, 1, 1], "conv_transpose2d bias")?;
        }
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        if oh < 2 * pad + 1 || ow < 2 * pad + 1 {
            return Err(Error::Shape("conv_transpose2d: padding too large".into()));
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let geom = ConvGeom::new(co, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::Shape("conv_transpose2d: inconsistent geometry".into()))?;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        let per_out = co * oh * ow;
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                conv::conv_transpose2d_forward(
                    xv.sample(i),
                    &geom,
                    wv,
                    bv,
                    c,
                    &mut cols,
                    &mut out.data_mut()[i * per_out..(i + 1) * per_out],
                );
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::c(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.ng(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let needs = self.ng(x);
        self.push(out, Op::Exp { x }, needs)
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::c(floor);
        let out = self.value(x).map(|v| v.max(floor).ln());
        let needs = self.ng(x);
        self.push(out, Op::LogClamped { x, floor }, needs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::c(lo), T::c(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let needs = self.ng(x);
        self.push(out, Op::Clamp { x, lo, hi }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::c(c);
        let out = self.value(x).map(|v| v * c);
        let needs = self.ng(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::c(c);
        let out = self.value(x).map(|v| v + c);
        let needs = self.ng(x);
        self.push(out, Op::AddScalar { x }, needs)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Mean of all elements, as a `[1,1,1,1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = mean_of(self.value(x).data());
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, needs)
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.binary(a, b, "mean_abs_diff", |x, y| (x - y).abs())?;
        let m = mean_of(diff.data());
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(m), Op::MeanAbsDiff { a, b }, needs))
    }

    /// Mean over elements of `0.5·(μ² + exp(logvar) − 1 − logvar)`.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let half = T::c(0.5);
        let terms = self.binary(mu, logvar, "kl_std_normal", |m, lv| {
            half * (m * m + lv.exp() - T::one() - lv)
        })?;
        let kl = mean_of(terms.data());
        let needs = self.ng(mu) || self.ng(logvar);
        Ok(self.push(Tensor::scalar(kl), Op::KlStdNormal { mu, logvar }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        let [nb, cb, hb, wb] = tb.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(ta.sample(i));
            data.extend_from_slice(tb.sample(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, needs))
    }

    /// Normalizes every `(sample, channel)` plane to zero mean and unit
    /// variance: `(x - mean) / sqrt(var + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let plane = h * w;
        let count = T::c(plane as f64);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(n * c);
        for p in data.chunks_mut(plane.max(1)) {
            let mean = mean_of(p);
            let var = p.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let s = T::one() / (var + T::c(eps)).sqrt();
            p.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let out = Tensor::from_vec([n, c, h, w], data).expect("same shape");
        let needs = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, needs)
    }

    /// Mean softmax cross-entropy of `[N, K, 1, 1]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let [n, k, h, w] = t.shape();
        if h != 1 || w != 1 || n != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} with {} labels",
                t.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: bad,
                len: k,
            });
        }
        let probs = softmax_rows(t.data(), k);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].f64().max(1e-300).ln())
            .sum::<f64>()
            / n as f64;
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(T::c(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.batch();
                let co = wv.shape()[0];
                let plane = geom.col_rows() * geom.col_cols();
                let mut dw = self.ng(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.ng(*x).then(|| Tensor::zeros(xv.shape()));
                let mut scratch = if dx.is_some() {
                    vec![T::zero(); plane]
                } else {
                    Vec::new()
                };
                let per_in = xv.len() / n.max(1);
                for i in 0..n {
                    conv::conv2d_backward(
                        g.sample(i),
                        geom,
                        wv.data(),
                        co,
                        &cols[i * plane..(i + 1) * plane],
                        dw.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| &mut t.data_mut()[i * per_in..(i + 1) * per_in]),
                        &mut scratch,
                    );
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    accumulate(grads, b, bias_grad(g));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.batch();
                let ci = wv.shape()[0];
                let mut dw = self.ng(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.ng(*x).then(|| Tensor::zeros(xv.shape()));
                let mut scratch = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                let per_in = xv.len() / n.max(1);
                for i in 0..n {
                    conv::conv_transpose2d_backward(
                        g.sample(i),
                        geom,
                        wv.data(),
                        xv.sample(i),
                        ci,
                        dw.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| &mut t.data_mut()[i * per_in..(i + 1) * per_in]),
                        &mut scratch,
                    );
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    accumulate(grads, b, bias_grad(g));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |gv, v| if v > T::zero() { gv } else { gv * *slope });
                accumulate(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let d = zip_map(g, &node.value, |gv, s| gv * s * (T::one() - s));
                accumulate(grads, *x, d);
            }
            Op::Exp { x } => {
                let d = zip_map(g, &node.value, |gv, e| gv * e);
                accumulate(grads, *x, d);
            }
            Op::LogClamped { x, floor } => {
                let d = zip_map(g, self.value(*x), |gv, v| if v > *floor { gv / v } else { T::zero() });
                accumulate(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = zip_map(
                    g,
                    self.value(*x),
                    |gv, v| {
                        if v >= *lo && v <= *hi {
                            gv
                        } else {
                            T::zero()
                        }
                    },
                );
                accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, zip_map(g, self.value(*b), |gv, v| gv * v));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, zip_map(g, self.value(*a), |gv, v| gv * v));
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.map(|v| v * *c));
            }
            Op::AddScalar { x } => {
                accumulate(grads, *x, g.clone());
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let share = g.item() / T::c(xv.len() as f64);
                accumulate(grads, *x, Tensor::full(xv.shape(), share));
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let share = g.item() / T::c(av.len() as f64);
                let d = zip_map(av, bv, |x, y| {
                    if x > y {
                        share
                    } else if x < y {
                        -share
                    } else {
                        T::zero()
                    }
                });
                if self.ng(*b) {
                    accumulate(grads, *b, d.map(|v| -v));
                }
                if self.ng(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::KlStdNormal { mu, logvar } => {
                let share = g.item() / T::c(self.value(*mu).len() as f64);
                if self.ng(*mu) {
                    accumulate(grads, *mu, self.value(*mu).map(|m| m * share));
                }
                if self.ng(*logvar) {
                    let half = T::c(0.5);
                    accumulate(
                        grads,
                        *logvar,
                        self.value(*logvar).map(|lv| half * (lv.exp() - T::one()) * share),
                    );
                }
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.value(*a).channels();
                let [n, c, h, w] = g.shape();
                let plane = h * w;
                let split = |lo: usize, hi: usize| {
                    let mut data = Vec::with_capacity(n * (hi - lo) * plane);
                    for i in 0..n {
                        let s = g.sample(i);
                        data.extend_from_slice(&s[lo * plane..hi * plane]);
                    }
                    Tensor::from_vec([n, hi - lo, h, w], data).expect("concat split")
                };
                if self.ng(*a) {
                    accumulate(grads, *a, split(0, ca));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, split(ca, c));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let plane = g.len() / inv_std.len().max(1);
                let mut d = g.data().to_vec();
                for ((dp, yp), &s) in d
                    .chunks_mut(plane.max(1))
                    .zip(node.value.data().chunks(plane.max(1)))
                    .zip(inv_std)
                {
                    let mg = mean_of(dp);
                    let mgy = dp.iter().zip(yp).fold(T::zero(), |a, (&gv, &y)| a + gv * y) / T::c(plane as f64);
                    dp.iter_mut()
                        .zip(yp)
                        .for_each(|(gv, &y)| *gv = s * (*gv - mg - y * mgy));
                }
                accumulate(grads, *x, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let [n, k, _, _] = lv.shape();
                let share = g.item() / T::c(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * share);
                accumulate(grads, *logits, Tensor::from_vec(lv.shape(), d).expect("shape"));
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter; `None` if it was not bound or the loss
    /// does not depend on it.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of all bound parameters the loss depends on.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, v)| self.grads[v.0].take().map(|g| (name, g)))
            .collect()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn bias_grad<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = g.shape();
    let mut acc = vec![T::zero(); c];
    for i in 0..n {
        conv::channel_sums(g.sample(i), c, h * w, &mut acc);
    }
    Tensor::from_vec([1, c, 1, 1], acc).expect("bias shape")
}

fn mean_of<T: Scalar>(data: &[T]) -> T {
    let sum = data.iter().fold(T::zero(), |a, &v| a + v);
    sum / T::c(data.len().max(1) as f64)
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of an `n × k` row-major buffer.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal};
    use crate::tensor::Shape;

    /// Central finite-difference check of d(loss)/d(leaf) for a graph builder.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: Vec<Tensor<f64>>, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.scalar(l)
        };
        let eps = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = analytic.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < tol, "input {k} elem {i}: fd {fd} analytic {an}");
            }
        }
    }

    fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
        standard_normal(shape, &mut rng_for(seed, &[]))
    }

    #[test]
    fn conv_and_transpose_gradients() {
        check(
            |g, v| {
                let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                let a = g.leaky_relu(c, 0.2);
                let t = g.conv_transpose2d(a, v[3], Some(v[4]), 2, 1).unwrap();
                let s = g.sigmoid(t);
                let sq = g.mul(s, s).unwrap();
                g.mean(sq)
            },
            vec![
                randn([2, 2, 6, 6], 1),
                randn([3, 2, 4, 4], 2),
                randn([1, 3, 1, 1], 3),
                randn([3, 2, 4, 4], 4),
                randn([1, 2, 1, 1], 5),
            ],
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_loss_gradients() {
        check(
            |g, v| {
                let lv = g.clamp(v[1], -10.0, 10.0);
                let kl = g.kl_std_normal(v[0], lv).unwrap();
                let half = g.scale(lv, 0.5);
                let sd = g.exp(half);
                let cat = g.concat_channels(v[0], sd).unwrap();
                let s = g.sigmoid(cat);
                let one_m = g.one_minus(s);
                let lg = g.log_clamped(one_m, 1e-7);
                let m = g.mean(lg);
                let d = g.sub(v[0], v[2]).unwrap();
                let l1 = g.mean_abs_diff(d, v[1]).unwrap();
                let t = g.add(kl, m).unwrap();
                g.add(t, l1).unwrap()
            },
            vec![randn([2, 2, 3, 3], 6), randn([2, 2, 3, 3], 7), randn([2, 2, 3, 3], 8)],
            1e-6,
        );
    }

    #[test]
    fn instance_norm_gradient() {
        check(
            |g, v| {
                let y = g.instance_norm(v[0], 1e-5);
                let p = g.mul(y, v[1]).unwrap();
                let s = g.sigmoid(p);
                g.mean(s)
            },
            vec![randn([2, 3, 3, 3], 10), randn([2, 3, 3, 3], 11)],
            1e-6,
        );
    }

    #[test]
    fn instance_norm_standardizes_planes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(randn([2, 2, 4, 4], 12).map(|v| 3.0 * v + 1.5));
        let y = g.instance_norm(x, 0.0);
        for p in g.value(y).data().chunks(16) {
            let m = p.iter().sum::<f64>() / 16.0;
            let v = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        check(
            |g, v| g.cross_entropy(v[0], &[2, 0, 1]).unwrap(),
            vec![randn([3, 4, 1, 1], 9)],
            1e-6,
        );
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p);
        assert_eq!(grads.param("w").unwrap().item(), 6.0);
        assert_eq!(g.bound_params().collect::<Vec<_>>(), vec!["w"]);
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let yd = g.detach(y);
        let z = g.mul(yd, x).unwrap();
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
        assert!(grads.get(yd).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.mean_abs_diff(a, b), Err(Error::Shape(_))));
    }
}
