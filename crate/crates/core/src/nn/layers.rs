use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::conv::{conv_forward, conv_transpose_forward, ConvGeom};
use super::graph::BnMode;
use super::NnError;
use crate::real::{gemm, Real, Trans};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    BatchNorm,
    FullyConnected,
    /// Per-channel interval logits of the rate density model.
    Density,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 1,
            LayerKind::ConvTranspose => 2,
            LayerKind::BatchNorm => 3,
            LayerKind::FullyConnected => 4,
            LayerKind::Density => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Conv,
            2 => LayerKind::ConvTranspose,
            3 => LayerKind::BatchNorm,
            4 => LayerKind::FullyConnected,
            5 => LayerKind::Density,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Weight,
    Bias,
}

/// Identifies one trainable tensor: a layer index plus weight/bias slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub slot: Slot,
}

impl ParamId {
    pub fn weight(layer: usize) -> Self {
        Self {
            layer,
            slot: Slot::Weight,
        }
    }

    pub fn bias(layer: usize) -> Self {
        Self {
            layer,
            slot: Slot::Bias,
        }
    }
}

/// Parameters of one layer.
///
/// * conv: weight `out×in×k×k`, bias `out`
/// * conv-transpose: weight `in×out×k×k`, bias `out`
/// * batchnorm: weight = scale, bias = shift, plus running statistics
/// * fully connected: weight `out×in`, bias `out`
/// * density: weight `channels×intervals`, empty bias
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub kind: LayerKind,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub stride: usize,
    pub kernel: usize,
}

fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
    let std = num_traits::Float::sqrt(gain / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| T::lit(std * standard_normal(rng)))
}

impl<T: Real> LayerParams<T> {
    pub fn conv<R: Rng + ?Sized>(out_c: usize, in_c: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            kind: LayerKind::Conv,
            weight: he_normal(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng),
            bias: Tensor::zeros(&[out_c]),
            running_mean: None,
            running_var: None,
            stride,
            kernel,
        }
    }

    pub fn conv_transpose<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel).div_ceil(stride * stride);
        Self {
            kind: LayerKind::ConvTranspose,
            weight: he_normal(&[in_c, out_c, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_c]),
            running_mean: None,
            running_var: None,
            stride,
            kernel,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            weight: Tensor::full(&[channels], T::one()),
            bias: Tensor::zeros(&[channels]),
            running_mean: Some(Tensor::zeros(&[channels])),
            running_var: Some(Tensor::full(&[channels], T::one())),
            stride: 1,
            kernel: 1,
        }
    }

    pub fn fully_connected<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            weight: he_normal(&[out_f, in_f], in_f, rng),
            bias: Tensor::zeros(&[out_f]),
            running_mean: None,
            running_var: None,
            stride: 1,
            kernel: 1,
        }
    }

    /// Uniform density over all intervals (all logits zero).
    pub fn density(channels: usize, intervals: usize) -> Self {
        Self {
            kind: LayerKind::Density,
            weight: Tensor::zeros(&[channels, intervals]),
            bias: Tensor::zeros(&[0]),
            running_mean: None,
            running_var: None,
            stride: 1,
            kernel: 1,
        }
    }

    pub fn param(&self, slot: Slot) -> &Tensor<T> {
        match slot {
            Slot::Weight => &self.weight,
            Slot::Bias => &self.bias,
        }
    }

    pub fn param_mut(&mut self, slot: Slot) -> &mut Tensor<T> {
        match slot {
            Slot::Weight => &mut self.weight,
            Slot::Bias => &mut self.bias,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv | LayerKind::FullyConnected => self.weight.shape()[0],
            LayerKind::ConvTranspose => self.weight.shape()[1],
            LayerKind::BatchNorm | LayerKind::Density => self.weight.shape()[0],
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv | LayerKind::FullyConnected => self.weight.shape()[1],
            LayerKind::ConvTranspose => self.weight.shape()[0],
            LayerKind::BatchNorm | LayerKind::Density => self.weight.shape()[0],
        }
    }

    /// Checks the structural invariants of the layer kind.
    pub fn validate(&self) -> Result<(), NnError> {
        let ws = self.weight.shape();
        match self.kind {
            LayerKind::Conv | LayerKind::ConvTranspose => {
                if self.stride == 0 || self.kernel == 0 {
                    return Err(NnError::Config("stride and kernel must be positive"));
                }
                if ws.len() != 4 || ws[2] != self.kernel || ws[3] != self.kernel {
                    return Err(NnError::Config("conv weight must be a×b×k×k"));
                }
                if self.bias.shape() != [self.out_channels()] {
                    return Err(NnError::Config("conv bias length must equal output channels"));
                }
            }
            LayerKind::BatchNorm => {
                let c = ws.first().copied().unwrap_or(0);
                let (Some(m), Some(v)) = (&self.running_mean, &self.running_var) else {
                    return Err(NnError::Config("batchnorm needs running statistics"));
                };
                if ws.len() != 1 || self.bias.shape() != [c] || m.shape() != [c] || v.shape() != [c] {
                    return Err(NnError::Config("batchnorm tensors must all have length C"));
                }
                if v.data().iter().any(|&x| x <= T::zero() || !x.is_finite()) {
                    return Err(NnError::Config("batchnorm running variance must be strictly positive"));
                }
            }
            LayerKind::FullyConnected => {
                if ws.len() != 2 || self.bias.shape() != [ws[0]] {
                    return Err(NnError::Config("fully connected weight must be out×in with bias out"));
                }
            }
            LayerKind::Density => {
                if ws.len() != 2 || ws[1] < 2 {
                    return Err(NnError::Config("density weight must be channels×intervals"));
                }
            }
        }
        Ok(())
    }
}

fn expect_kind<T: Real>(params: &LayerParams<T>, kind: LayerKind) -> Result<(), NnError> {
    if params.kind != kind {
        return Err(NnError::Config("layer kind does not match operation"));
    }
    params.validate()
}

fn restore_rank<T: Real>(input: &Tensor<T>, shape4: [usize; 4], data: Vec<T>) -> Tensor<T> {
    let t = if input.rank() == 3 {
        Tensor::new(&shape4[1..], data)
    } else {
        Tensor::new(&shape4, data)
    };
    t.expect("shape arithmetic")
}

/// Same-padded strided convolution on `C×H×W` or `N×C×H×W`.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>, NnError> {
    expect_kind(params, LayerKind::Conv)?;
    let [n, c, h, w] = input.nchw()?;
    if c != params.in_channels() {
        return Err(NnError::Shape {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: params.weight.shape().to_vec(),
        });
    }
    let g = ConvGeom::new(c, h, w, params.kernel, params.stride);
    let out_c = params.out_channels();
    let (out, _) = conv_forward(input.data(), n, &g, params.weight.data(), params.bias.data(), out_c);
    Ok(restore_rank(input, [n, out_c, g.out_h, g.out_w], out))
}

/// Transposed convolution; output spatial dims are input × stride.
pub fn conv_transpose2d<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>, NnError> {
    expect_kind(params, LayerKind::ConvTranspose)?;
    let [n, c, h, w] = input.nchw()?;
    if c != params.in_channels() {
        return Err(NnError::Shape {
            op: "conv_transpose2d",
            lhs: input.shape().to_vec(),
            rhs: params.weight.shape().to_vec(),
        });
    }
    let out_c = params.out_channels();
    let g = ConvGeom::new(
        out_c,
        h * params.stride,
        w * params.stride,
        params.kernel,
        params.stride,
    );
    let out = conv_transpose_forward(input.data(), n, &g, params.weight.data(), params.bias.data(), c);
    Ok(restore_rank(input, [n, out_c, g.height, g.width], out))
}

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Spatial batch normalization core; `stats` selects running statistics (inference).
pub(crate) fn bn_core<T: Real>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
) -> BnForward<T> {
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let eps = T::lit(BN_EPS);
    let (mut mean, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
    match stats {
        Some((m, v)) => {
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
        None => {
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Batch normalization over a batch (`N×C×H×W`) or, in inference, a single image.
pub fn batchnorm<T: Real>(input: &Tensor<T>, params: &LayerParams<T>, mode: BnMode) -> Result<Tensor<T>, NnError> {
    expect_kind(params, LayerKind::BatchNorm)?;
    let dims = input.nchw()?;
    if dims[1] != params.weight.len() {
        return Err(NnError::Shape {
            op: "batchnorm",
            lhs: input.shape().to_vec(),
            rhs: params.weight.shape().to_vec(),
        });
    }
    let stats = match mode {
        BnMode::Train => {
            if input.rank() != 4 || dims[0] < 2 {
                return Err(NnError::BatchTooSmall(if input.rank() == 4 { dims[0] } else { 1 }));
            }
            None
        }
        BnMode::Infer => Some((
            params.running_mean.as_ref().unwrap().data(),
            params.running_var.as_ref().unwrap().data(),
        )),
    };
    let out = bn_core(input.data(), dims, params.weight.data(), params.bias.data(), stats);
    Ok(restore_rank(input, dims, out.y))
}

/// `N×In` (or `In`) input to `N×Out` (or `Out`).
pub fn fully_connected<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>, NnError> {
    expect_kind(params, LayerKind::FullyConnected)?;
    let (out_f, in_f) = (params.out_channels(), params.in_channels());
    let (n, flat) = match *input.shape() {
        [f] => (1, f),
        [n, f] => (n, f),
        _ => (0, 0),
    };
    if flat != in_f || n == 0 {
        return Err(NnError::Shape {
            op: "fully_connected",
            lhs: input.shape().to_vec(),
            rhs: params.weight.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); n * out_f];
    for row in out.chunks_exact_mut(out_f) {
        row.copy_from_slice(params.bias.data());
    }
    gemm(
        n,
        in_f,
        out_f,
        T::one(),
        input.data(),
        Trans::No,
        params.weight.data(),
        Trans::Yes,
        T::one(),
        &mut out,
    );
    let shape: &[usize] = if input.rank() == 1 { &[out_f] } else { &[n, out_f] };
    Tensor::new(shape, out)
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { v * slope })
}

pub(crate) fn softmax_rows<T: Real>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (src, dst) in logits.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    out
}

/// Row-wise softmax over the last dimension.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if !logits.is_finite() {
        return Err(NnError::NonFinite("softmax input"));
    }
    let width = *logits
        .shape()
        .last()
        .ok_or(NnError::InvalidTensor("softmax of a scalar"))?;
    if width == 0 {
        return Err(NnError::InvalidTensor("softmax over zero classes"));
    }
    Tensor::new(logits.shape(), softmax_rows(logits.data(), width))
}
