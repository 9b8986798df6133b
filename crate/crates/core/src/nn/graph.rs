//! Tape-based reverse-mode differentiation over the handful of operations
//! the codec networks use.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvGeom};
use super::layers::{bn_core, softmax_rows, ParamId};
use super::NnError;
use crate::density::DensityModel;
use crate::real::{gemm, Real, Trans};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with running statistics.
    Infer,
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: [usize; 4],
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    PassThrough(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Mse(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Rate {
        y: Var,
        logits: Var,
        step: T,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Records a forward computation for later differentiation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [n, c, h, wd] = self.value(x).nchw()?;
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || self.value(b).len() != ws[0] || xs.len() != 4 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(c, h, wd, ws[2], stride);
        let (out, cols) = conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            self.value(b).data(),
            ws[0],
        );
        let value = Tensor::new(&[n, ws[0], geom.out_h, geom.out_w], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch: n,
                cols,
            },
            ng,
        ))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [n, c, h, wd] = self.value(x).nchw()?;
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] || self.value(b).len() != ws[1] || xs.len() != 4 {
            return Err(shape_err("conv_transpose2d", &xs, &ws));
        }
        let geom = ConvGeom::new(ws[1], h * stride, wd * stride, ws[2], stride);
        let out = conv_transpose_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            self.value(b).data(),
            c,
        );
        let value = Tensor::new(&[n, ws[1], geom.height, geom.width], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                batch: n,
            },
            ng,
        ))
    }

    /// Spatial batch normalization. In [`BnMode::Infer`] `running` supplies
    /// the statistics; in [`BnMode::Train`] the batch statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: (&Tensor<T>, &Tensor<T>),
    ) -> Result<(Var, Option<BatchStats<T>>), NnError> {
        let xs = self.value(x).shape().to_vec();
        let dims = self.value(x).nchw()?;
        if xs.len() != 4 || self.value(gamma).len() != dims[1] || self.value(beta).len() != dims[1] {
            return Err(shape_err("batch_norm", &xs, self.value(gamma).shape()));
        }
        let train = mode == BnMode::Train;
        if train && dims[0] < 2 {
            return Err(NnError::BatchTooSmall(dims[0]));
        }
        let stats = (!train).then(|| (running.0.data(), running.1.data()));
        let out = bn_core(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
        );
        let batch_stats = train.then(|| {
            let m = (dims[0] * dims[2] * dims[3]) as f64;
            let unbias = T::lit(m / (m - 1.0).max(1.0));
            BatchStats {
                mean: out.mean.clone(),
                var: out.var.iter().map(|&v| v * unbias).collect(),
            }
        });
        let value = Tensor::new(&xs, out.y)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat: out.xhat,
                inv_std: out.inv_std,
                train,
            },
            ng,
        );
        Ok((v, batch_stats))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(value, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Nearest-neighbour upsampling of the spatial dims by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, NnError> {
        let [n, c, h, w] = self.value(x).nchw()?;
        if self.value(x).rank() != 4 || factor == 0 {
            return Err(shape_err("upsample_nearest", self.value(x).shape(), &[factor]));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    d[y * ow + xx] = s[(y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Upsample { x, factor }, ng))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    /// Substitutes `value` in the forward pass; gradient flows to `x` unchanged.
    pub fn pass_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var, NnError> {
        if value.shape() != self.value(x).shape() {
            return Err(shape_err("pass_through", self.value(x).shape(), value.shape()));
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::PassThrough(x), ng))
    }

    /// `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let [n, c, h, w] = self.value(x).nchw()?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    /// `x: N×In`, `w: Out×In`, `b: Out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (n, in_f, out_f) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * out_f];
        for row in out.chunks_exact_mut(out_f) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            in_f,
            out_f,
            T::one(),
            self.value(x).data(),
            Trans::No,
            self.value(w).data(),
            Trans::Yes,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[n, out_f], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.is_empty() {
            return Err(shape_err("mse", va.shape(), vb.shape()));
        }
        let s: T = va.data().iter().zip(vb.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(s / T::lit(va.len() as f64));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mse(a, b), ng))
    }

    /// Batch-mean cross-entropy (nats) of `logits: N×K` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || labels.iter().any(|&l| l >= ls[1]) {
            return Err(shape_err("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        let k = ls[1];
        let data = self.value(logits).data();
        let probs = softmax_rows(data, k);
        let mut loss = T::zero();
        for (row, &label) in data.chunks_exact(k).zip(labels) {
            // log-sum-exp form
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[label];
        }
        let value = Tensor::scalar(loss / T::lit(labels.len() as f64));
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Estimated code length in bits per image of `y` (`N×C×H×W`, already
    /// on the noisy grid) under the density with interval `logits` (`C×J`).
    pub fn density_rate(&mut self, y: Var, logits: Var, step: T) -> Result<Var, NnError> {
        let [n, c, h, w] = self.value(y).nchw()?;
        let lshape = self.value(logits).shape().to_vec();
        if lshape.len() != 2 || lshape[0] != c {
            return Err(shape_err("density_rate", self.value(y).shape(), &lshape));
        }
        let model = DensityModel::from_logits(self.value(logits));
        let plane = h * w;
        let mut total = T::zero();
        for (i, &v) in self.value(y).data().iter().enumerate() {
            let ch = (i / plane) % c;
            let p = model.bin_probability(ch, v, step);
            if !(p >= T::lit(crate::density::PROBABILITY_FLOOR)) {
                return Err(NnError::ProbabilityFloor {
                    channel: ch,
                    value: v.as_f64(),
                });
            }
            total -= p.log2();
        }
        let value = Tensor::scalar(total / T::lit(n as f64));
        let ng = self.ng(y) || self.ng(logits);
        Ok(self.push(value, Op::Rate { y, logits, step }, ng))
    }

    /// Reverse pass from a scalar `loss`. Every parameter recorded in the
    /// graph receives a gradient (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::Usage("backward called without a recorded forward pass"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::Usage("backward needs a scalar loss"));
        }
        if !lv.is_finite() {
            return Err(NnError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1).rev() {
            if let Op::Param(id) = node.op {
                let g = grads[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                let t = Tensor::new(node.value.shape(), g)?;
                match out.map.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        out.map.insert(id, t);
                    }
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        // parameters recorded after the loss still get zero gradients
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(id) = node.op {
                out.map.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NnError> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            } => {
                let out_c = self.value(*w).shape()[0];
                let (dx, dw, db) = conv_backward(g, cols, *batch, geom, self.value(*w).data(), out_c, self.ng(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::ConvTranspose { x, w, b, geom, batch } => {
                let in_c = self.value(*w).shape()[0];
                let (dx, dw, db) = conv_transpose_backward(
                    g,
                    self.value(*x).data(),
                    *batch,
                    geom,
                    self.value(*w).data(),
                    in_c,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = *dims;
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::lit((n * hw) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                dx[i] = if *train {
                                    k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { gi * *slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.value(*b).data()).map(|(&gi, &v)| gi * v).collect();
                let db = g.iter().zip(self.value(*a).data()).map(|(&gi, &v)| gi * v).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *f).collect());
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = self.value(*x).nchw()?;
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v >= *lo && v <= *hi { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::PassThrough(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).nchw()?;
                let hw = h * w;
                let inv = T::one() / T::lit(hw as f64);
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gi in g {
                    dx.extend(core::iter::repeat_n(gi * inv, hw));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, in_f) = (xs[0], xs[1]);
                let out_f = self.value(*w).shape()[0];
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * in_f];
                    gemm(
                        n,
                        out_f,
                        in_f,
                        T::one(),
                        g,
                        Trans::No,
                        self.value(*w).data(),
                        Trans::No,
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                let mut dw = vec![T::zero(); out_f * in_f];
                gemm(
                    out_f,
                    n,
                    in_f,
                    T::one(),
                    g,
                    Trans::Yes,
                    self.value(*x).data(),
                    Trans::No,
                    T::zero(),
                    &mut dw,
                );
                self.accumulate(grads, *w, dw);
                let mut db = vec![T::zero(); out_f];
                for row in g.chunks_exact(out_f) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] * T::lit(2.0 / va.len() as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&p, &q)| k * (p - q)).collect();
                let db = da.iter().map(|&v| -v).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in d.chunks_exact_mut(k).zip(labels) {
                    row[label] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Rate { y, logits, step } => {
                let [n, c, h, w] = self.value(*y).nchw()?;
                let plane = h * w;
                let intervals = self.value(*logits).shape()[1];
                let model = DensityModel::from_logits(self.value(*logits));
                let half = *step * T::lit(0.5);
                let base = -g[0] / (T::lit(n as f64) * T::lit(core::f64::consts::LN_2));
                let mut dy = vec![T::zero(); self.value(*y).len()];
                let mut dmass = vec![T::zero(); c * intervals];
                for (i, &v) in self.value(*y).data().iter().enumerate() {
                    let ch = (i / plane) % c;
                    let p = model.bin_probability(ch, v, *step);
                    let dp = base / p;
                    dy[i] = dp * (model.pdf(ch, v + half) - model.pdf(ch, v - half));
                    model.accumulate_mass_grad(v, *step, dp, &mut dmass[ch * intervals..(ch + 1) * intervals]);
                }
                let mut dlogits = vec![T::zero(); c * intervals];
                for ch in 0..c {
                    model.mass_grad_to_logits(
                        ch,
                        &dmass[ch * intervals..(ch + 1) * intervals],
                        &mut dlogits[ch * intervals..(ch + 1) * intervals],
                    );
                }
                self.accumulate(grads, *y, dy);
                self.accumulate(grads, *logits, dlogits);
            }
        }
        Ok(())
    }
}
