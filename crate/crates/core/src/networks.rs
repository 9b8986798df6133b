//! Feature extractor `f`, reconstructor `g`, semantic head `h` and the
//! per-channel feature density, all held in one flat layer list.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use thiserror::Error;

use crate::density::DENSITY_INTERVALS;
use crate::nn::{BatchStats, BnMode, Graph, LayerKind, LayerParams, NnError, ParamId, Var, LEAKY_SLOPE};
use crate::quantizer::{check_bits, QuantError, CLAMP_LIMIT};
use crate::real::Real;
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
pub const DEFAULT_CHANNELS: usize = 128;
pub const DEFAULT_BITS: u8 = 6;
pub const TOP_K: usize = 5;

const ENCODER_KERNELS: [usize; STAGES] = [7, 5, 3, 3];
const DECODER_KERNELS: [usize; STAGES] = [3, 3, 5, 7];
const HEAD_WIDTHS: [usize; 2] = [64, 32];
const HEAD_HIDDEN: usize = 64;

// Flat layer layout.
const ENC: usize = 0;
const DEC: usize = ENC + 2 * STAGES;
const HEAD: usize = DEC + STAGES;
const DENSITY: usize = HEAD + 6;
pub const LAYER_COUNT: usize = DENSITY + 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("image {height}×{width} is not divisible by the stride product {factor}; pad it first")]
    IndivisibleDims { height: usize, width: usize, factor: usize },
    #[error("expected {expected} input channels, found {found}")]
    Channels { expected: usize, found: usize },
    #[error("feature map shape {found:?} does not match the model's {expected:?}")]
    FeatureShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid rate configuration: {0}")]
    Config(&'static str),
    #[error("layer {index} does not fit the network layout: {reason}")]
    Layout { index: usize, reason: &'static str },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Named stride presets, ordered from lowest to highest rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RatePreset {
    Lo,
    Mid,
    Hi,
}

impl RatePreset {
    pub const ALL: [RatePreset; 3] = [RatePreset::Lo, RatePreset::Mid, RatePreset::Hi];

    pub fn strides(self) -> [usize; STAGES] {
        match self {
            RatePreset::Hi => [4, 2, 1, 1],
            RatePreset::Mid => [4, 2, 2, 1],
            RatePreset::Lo => [4, 2, 2, 2],
        }
    }

    pub fn id(self) -> u8 {
        match self {
            RatePreset::Lo => 0,
            RatePreset::Mid => 1,
            RatePreset::Hi => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            RatePreset::Lo => "lo",
            RatePreset::Mid => "mid",
            RatePreset::Hi => "hi",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn from_strides(strides: [usize; STAGES]) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.strides() == strides)
    }
}

impl fmt::Display for RatePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RateConfig {
    pub strides: [usize; STAGES],
    pub channels: [usize; STAGES],
    pub bits: u8,
}

impl RateConfig {
    pub fn preset(p: RatePreset) -> Self {
        Self {
            strides: p.strides(),
            channels: [DEFAULT_CHANNELS; STAGES],
            bits: DEFAULT_BITS,
        }
    }

    /// Same width for every stage.
    pub fn with_channels(mut self, c: usize) -> Self {
        self.channels = [c; STAGES];
        self
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = bits;
        self
    }

    pub fn named_preset(&self) -> Option<RatePreset> {
        RatePreset::from_strides(self.strides)
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[STAGES - 1]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.strides.iter().any(|s| ![1, 2, 4].contains(s)) {
            return Err(ModelError::Config("strides must be 1, 2 or 4"));
        }
        if self.channels.contains(&0) {
            return Err(ModelError::Config("channel counts must be positive"));
        }
        check_bits(self.bits)?;
        Ok(())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<(), ModelError> {
        let factor = self.stride_product();
        if height == 0 || width == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(ModelError::IndivisibleDims { height, width, factor });
        }
        Ok(())
    }

    /// `Cf×Hf×Wf` for an `H×W` image.
    pub fn feature_shape(&self, height: usize, width: usize) -> Result<[usize; 3], ModelError> {
        self.check_dims(height, width)?;
        let f = self.stride_product();
        Ok([self.feature_channels(), height / f, width / f])
    }
}

/// Classification of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticResult {
    pub class_id: usize,
    pub probabilities: Vec<f64>,
    /// `(id, probability)` in descending probability, ties by lower id.
    pub top: Vec<(usize, f64)>,
}

impl SemanticResult {
    pub fn from_probabilities(probabilities: Vec<f64>, k: usize) -> Self {
        let mut order: Vec<usize> = (0..probabilities.len()).collect();
        order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
        let top: Vec<(usize, f64)> = order.iter().take(k).map(|&i| (i, probabilities[i])).collect();
        Self {
            class_id: top.first().map_or(0, |t| t.0),
            probabilities,
            top,
        }
    }

    pub fn in_top(&self, label: usize) -> bool {
        self.top.iter().any(|&(id, _)| id == label)
    }
}

/// Which value the classifier consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Classify at decode time from dequantized features.
    PostSemantic,
    /// Classify at encode time from float features; the label is stored in the stream.
    PreSemantic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PostSemantic => "post",
            Variant::PreSemantic => "pre",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "post" => Some(Variant::PostSemantic),
            "pre" => Some(Variant::PreSemantic),
            _ => None,
        }
    }
}

/// Collected batch-norm statistics from a training forward pass.
pub type StatsLog<T> = Vec<(usize, BatchStats<T>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: RateConfig,
    classes: usize,
    layers: Vec<LayerParams<T>>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: RateConfig, classes: usize, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        if classes == 0 {
            return Err(ModelError::Config("class count must be positive"));
        }
        let mut layers = Vec::with_capacity(LAYER_COUNT);
        let mut in_c = 3;
        for s in 0..STAGES {
            let out_c = config.channels[s];
            layers.push(LayerParams::conv(
                out_c,
                in_c,
                ENCODER_KERNELS[s],
                config.strides[s],
                rng,
            ));
            layers.push(LayerParams::batchnorm(out_c));
            in_c = out_c;
        }
        for s in 0..STAGES {
            let out_c = decoder_out_channels(&config, s);
            let mut l =
                LayerParams::conv_transpose(in_c, out_c, DECODER_KERNELS[s], config.strides[STAGES - 1 - s], rng);
            if s == STAGES - 1 {
                l.bias = Tensor::full(&[3], T::lit(0.5));
                l.weight = l.weight.map(|w| w * T::lit(0.1));
            }
            layers.push(l);
            in_c = out_c;
        }
        let cf = config.feature_channels();
        layers.push(LayerParams::conv(HEAD_WIDTHS[0], cf, 3, 2, rng));
        layers.push(LayerParams::batchnorm(HEAD_WIDTHS[0]));
        layers.push(LayerParams::conv(HEAD_WIDTHS[1], HEAD_WIDTHS[0], 3, 2, rng));
        layers.push(LayerParams::batchnorm(HEAD_WIDTHS[1]));
        layers.push(LayerParams::fully_connected(HEAD_WIDTHS[1], HEAD_HIDDEN, rng));
        layers.push(LayerParams::fully_connected(HEAD_HIDDEN, classes, rng));
        layers.push(LayerParams::density(cf, DENSITY_INTERVALS));
        Self::from_layers(config, classes, layers)
    }

    /// Rebuilds a model from stored layers, checking them against the layout
    /// implied by `config` and `classes`.
    pub fn from_layers(config: RateConfig, classes: usize, layers: Vec<LayerParams<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        if layers.len() != LAYER_COUNT {
            return Err(ModelError::Layout {
                index: layers.len(),
                reason: "wrong layer count",
            });
        }
        let expect = expected_layout(&config, classes);
        for (index, (l, (kind, w_shape, stride))) in layers.iter().zip(expect).enumerate() {
            if l.kind != kind {
                return Err(ModelError::Layout {
                    index,
                    reason: "layer kind",
                });
            }
            if l.weight.shape() != w_shape.as_slice() {
                return Err(ModelError::Layout {
                    index,
                    reason: "weight shape",
                });
            }
            if matches!(kind, LayerKind::Conv | LayerKind::ConvTranspose) && l.stride != stride {
                return Err(ModelError::Layout {
                    index,
                    reason: "stride",
                });
            }
            l.validate().map_err(|_| ModelError::Layout {
                index,
                reason: "layer invariants",
            })?;
        }
        Ok(Self {
            config,
            classes,
            layers,
        })
    }

    pub fn config(&self) -> &RateConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<LayerParams<T>> {
        self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every trainable tensor with its id, in layer order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| [(ParamId::weight(i), &mut l.weight), (ParamId::bias(i), &mut l.bias)])
    }

    pub fn density_layer(&self) -> &LayerParams<T> {
        &self.layers[DENSITY]
    }

    /// Blends batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &StatsLog<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (layer, s) in stats {
            let l = &mut self.layers[*layer];
            if let (Some(rm), Some(rv)) = (l.running_mean.as_mut(), l.running_var.as_mut()) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    fn bind(&self, g: &mut Graph<T>, layer: usize) -> (Var, Var) {
        let l = &self.layers[layer];
        (
            g.param(ParamId::weight(layer), l.weight.clone()),
            g.param(ParamId::bias(layer), l.bias.clone()),
        )
    }

    fn bn(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: usize,
        mode: BnMode,
        log: &mut StatsLog<T>,
    ) -> Result<Var, ModelError> {
        let (gamma, beta) = self.bind(g, layer);
        let l = &self.layers[layer];
        let running = (
            l.running_mean.as_ref().expect("batchnorm layer"),
            l.running_var.as_ref().expect("batchnorm layer"),
        );
        let (y, stats) = g.batch_norm(x, gamma, beta, mode, running)?;
        if let Some(s) = stats {
            log.push((layer, s));
        }
        Ok(y)
    }

    fn conv_bn_leaky(
        &self,
        g: &mut Graph<T>,
        x: Var,
        conv: usize,
        mode: BnMode,
        log: &mut StatsLog<T>,
    ) -> Result<Var, ModelError> {
        let (w, b) = self.bind(g, conv);
        let y = g.conv2d(x, w, b, self.layers[conv].stride)?;
        let y = self.bn(g, y, conv + 1, mode, log)?;
        Ok(g.leaky_relu(y, T::lit(LEAKY_SLOPE)))
    }

    fn check_image(&self, shape: &[usize]) -> Result<(), ModelError> {
        let &[_, c, h, w] = shape else {
            return Err(ModelError::Channels { expected: 3, found: 0 });
        };
        if c != 3 {
            return Err(ModelError::Channels { expected: 3, found: c });
        }
        self.config.check_dims(h, w)
    }

    /// Feature extractor on an `N×3×H×W` batch; output is unclamped.
    pub fn encoder_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: BnMode,
        log: &mut StatsLog<T>,
    ) -> Result<Var, ModelError> {
        self.check_image(g.value(x).shape())?;
        let mut h = x;
        for s in 0..STAGES {
            let conv = ENC + 2 * s;
            let (w, b) = self.bind(g, conv);
            let y = g.conv2d(h, w, b, self.config.strides[s])?;
            let mut y = self.bn(g, y, conv + 1, mode, log)?;
            if g.value(y).shape() == g.value(h).shape() {
                y = g.add(y, h)?;
            }
            h = g.leaky_relu(y, T::lit(LEAKY_SLOPE));
        }
        Ok(h)
    }

    /// Reconstructor from (dequantized) `N×Cf×Hf×Wf` features to images in `[0, 1]`.
    pub fn decoder_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var, ModelError> {
        self.check_features(g.value(y).shape())?;
        let mut h = y;
        for s in 0..STAGES {
            let layer = DEC + s;
            let stride = self.config.strides[STAGES - 1 - s];
            let (w, b) = self.bind(g, layer);
            let mut z = g.conv_transpose2d(h, w, b, stride)?;
            if s == STAGES - 1 {
                return Ok(g.clamp(z, T::zero(), T::one()));
            }
            if self.layers[layer].in_channels() == self.layers[layer].out_channels() {
                let up = g.upsample_nearest(h, stride)?;
                z = g.add(z, up)?;
            }
            h = g.leaky_relu(z, T::lit(LEAKY_SLOPE));
        }
        unreachable!("decoder ends at the last stage")
    }

    /// Semantic head on features; the input is clamped to the codec range
    /// first. Returns `N×K` logits.
    pub fn head_graph(&self, g: &mut Graph<T>, y: Var, mode: BnMode, log: &mut StatsLog<T>) -> Result<Var, ModelError> {
        self.check_features(g.value(y).shape())?;
        let lim = T::lit(CLAMP_LIMIT);
        let y = g.clamp(y, -lim, lim);
        let h = self.conv_bn_leaky(g, y, HEAD, mode, log)?;
        let h = self.conv_bn_leaky(g, h, HEAD + 2, mode, log)?;
        let pooled = g.global_avg_pool(h)?;
        let (w, b) = self.bind(g, HEAD + 4);
        let hidden = g.linear(pooled, w, b)?;
        let hidden = g.leaky_relu(hidden, T::lit(LEAKY_SLOPE));
        let (w, b) = self.bind(g, HEAD + 5);
        Ok(g.linear(hidden, w, b)?)
    }

    /// The density logits (`Cf×J`) as a trainable value.
    pub fn density_graph(&self, g: &mut Graph<T>) -> Var {
        self.bind(g, DENSITY).0
    }

    fn check_features(&self, shape: &[usize]) -> Result<(), ModelError> {
        let cf = self.config.feature_channels();
        match *shape {
            [_, c, h, w] if c == cf && h > 0 && w > 0 => Ok(()),
            _ => Err(ModelError::FeatureShape {
                expected: vec![cf],
                found: shape.to_vec(),
            }),
        }
    }

    fn batched(t: &Tensor<T>) -> Result<(Tensor<T>, bool), ModelError> {
        if t.rank() == 3 {
            let s = t.shape().to_vec();
            Ok((t.clone().reshape(&[1, s[0], s[1], s[2]])?, true))
        } else {
            Ok((t.clone(), false))
        }
    }

    fn unbatched(t: &Tensor<T>, lifted: bool) -> Tensor<T> {
        if lifted {
            t.batch_item(0)
        } else {
            t.clone()
        }
    }

    /// `f(x)` for a `3×H×W` image or `N×3×H×W` batch, using running BN statistics.
    pub fn extract_features(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (xb, lifted) = Self::batched(x)?;
        let mut g = Graph::inference();
        let v = g.input(xb);
        let y = self.encoder_graph(&mut g, v, BnMode::Infer, &mut Vec::new())?;
        Ok(Self::unbatched(g.value(y), lifted))
    }

    /// `g(ŷ)` for dequantized features; same rank as the input.
    pub fn reconstruct(&self, y_hat: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (yb, lifted) = Self::batched(y_hat)?;
        let mut g = Graph::inference();
        let v = g.input(yb);
        let x = self.decoder_graph(&mut g, v)?;
        Ok(Self::unbatched(g.value(x), lifted))
    }

    /// `N×K` logits from features.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (yb, _) = Self::batched(features)?;
        let mut g = Graph::inference();
        let v = g.input(yb);
        let l = self.head_graph(&mut g, v, BnMode::Infer, &mut Vec::new())?;
        Ok(g.value(l).clone())
    }

    /// `h(y)` for each image in the batch.
    pub fn classify_batch(&self, features: &Tensor<T>) -> Result<Vec<SemanticResult>, ModelError> {
        let logits = self.logits(features)?;
        let probs = crate::nn::softmax(&logits)?;
        let k = self.classes;
        Ok(probs
            .data()
            .chunks_exact(k)
            .map(|row| SemanticResult::from_probabilities(row.iter().map(|p| p.as_f64()).collect(), TOP_K.min(k)))
            .collect())
    }

    /// `h(y)` for one `Cf×Hf×Wf` feature map.
    pub fn classify(&self, features: &Tensor<T>) -> Result<SemanticResult, ModelError> {
        if features.rank() != 3 {
            return Err(ModelError::FeatureShape {
                expected: vec![self.config.feature_channels()],
                found: features.shape().to_vec(),
            });
        }
        Ok(self.classify_batch(features)?.remove(0))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            classes: self.classes,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    kind: l.kind,
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    running_mean: l.running_mean.as_ref().map(Tensor::cast),
                    running_var: l.running_var.as_ref().map(Tensor::cast),
                    stride: l.stride,
                    kernel: l.kernel,
                })
                .collect(),
        }
    }
}

fn decoder_out_channels(config: &RateConfig, stage: usize) -> usize {
    if stage == STAGES - 1 {
        3
    } else {
        config.channels[STAGES - 2 - stage]
    }
}

fn expected_layout(config: &RateConfig, classes: usize) -> Vec<(LayerKind, Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(LAYER_COUNT);
    let mut in_c = 3;
    for s in 0..STAGES {
        let c = config.channels[s];
        let k = ENCODER_KERNELS[s];
        out.push((LayerKind::Conv, vec![c, in_c, k, k], config.strides[s]));
        out.push((LayerKind::BatchNorm, vec![c], 1));
        in_c = c;
    }
    for s in 0..STAGES {
        let c = decoder_out_channels(config, s);
        let k = DECODER_KERNELS[s];
        out.push((
            LayerKind::ConvTranspose,
            vec![in_c, c, k, k],
            config.strides[STAGES - 1 - s],
        ));
        in_c = c;
    }
    let cf = config.feature_channels();
    let [a, b] = HEAD_WIDTHS;
    out.push((LayerKind::Conv, vec![a, cf, 3, 3], 2));
    out.push((LayerKind::BatchNorm, vec![a], 1));
    out.push((LayerKind::Conv, vec![b, a, 3, 3], 2));
    out.push((LayerKind::BatchNorm, vec![b], 1));
    out.push((LayerKind::FullyConnected, vec![HEAD_HIDDEN, b], 1));
    out.push((LayerKind::FullyConnected, vec![classes, HEAD_HIDDEN], 1));
    out.push((LayerKind::Density, vec![cf, DENSITY_INTERVALS], 1));
    out
}
