//! Joint rate / distortion / semantic objective and the training loop.

use alloc::vec::Vec;

use thiserror::Error;

use crate::density::{feature_bits, DensityModel};
use crate::networks::{Model, ModelError, StatsLog, Variant};
use crate::nn::{Adam, AdamConfig, BnMode, Graph, NnError};
use crate::quantizer::{clamp_features, grid_step, quantize_surrogate, QuantError, SurrogateMode};
use crate::real::Real;
use crate::rng::{seeded, CodecRng};
use crate::tensor::Tensor;

/// Smallest class probability used by [`semantic_loss`].
pub const SEMANTIC_FLOOR: f64 = 1e-12;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {loss:?}")]
    NonFinite { step: u64, loss: LossBreakdown },
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// The components of `L = R + λ1·D + λ2·L_sem`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Bits per image.
    pub rate: f64,
    /// Mean squared error.
    pub distortion: f64,
    /// Cross-entropy in nats.
    pub semantic: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rate, self.distortion, self.semantic, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(rate: f64, distortion: f64, semantic: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        rate,
        distortion,
        semantic,
        lambda1,
        lambda2,
        total: rate + lambda1 * distortion + lambda2 * semantic,
    }
}

/// Mean squared difference.
pub fn distortion<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64, NnError> {
    if x.shape() != x_hat.shape() || x.is_empty() {
        return Err(NnError::Shape {
            op: "distortion",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / x.len() as f64)
}

/// `-ln p[label]` with the probability floored.
pub fn semantic_loss(probs: &[f64], label: usize) -> f64 {
    -num_traits::Float::ln(probs[label].max(SEMANTIC_FLOOR))
}

/// `-ln softmax(logits)[label]` through log-sum-exp.
pub fn semantic_loss_from_logits(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + num_traits::Float::ln(logits.iter().map(|&z| num_traits::Float::exp(z - m)).sum::<f64>());
    lse - logits[label]
}

/// Bits per image of `values` (`C×H×W` or a batch) under the density,
/// with bins of width `2^(1-B)` centred on each value.
pub fn rate_term<T: Real>(values: &Tensor<T>, density: &DensityModel<T>, bits: u8) -> Result<f64, NnError> {
    let [n, ..] = values.nchw()?;
    let total = feature_bits(density, values, bits).map_err(|(channel, v)| NnError::ProbabilityFloor {
        channel,
        value: v.as_f64(),
    })?;
    Ok(total.as_f64() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Feed clamped float features everywhere a quantized surrogate would go.
    pub bypass_quantizer: bool,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            lambda1: 1000.0,
            lambda2: 10.0,
            lr: 0.003,
            seed: 0,
            variant: Variant::PostSemantic,
            bypass_quantizer: false,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl TrainConfig {
    /// Learning rate at `step`: divided by 5 at 50% and again at 80% of the run.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        let n = self.steps as f64;
        if s >= 0.8 * n {
            self.lr * 0.04
        } else if s >= 0.5 * n {
            self.lr * 0.2
        } else {
            self.lr
        }
    }
}

/// A model, its optimizer state and the loss history.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f32> {
    pub model: Model<T>,
    pub config: TrainConfig,
    adam: Adam<T>,
    rng: CodecRng,
    history: Vec<LossBreakdown>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        Self {
            model,
            config,
            adam: Adam::new(AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            }),
            rng: seeded(config.seed),
            history: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    /// The trainer's random stream, shared with batch sampling so a single
    /// seed fixes the whole run.
    pub fn rng(&mut self) -> &mut CodecRng {
        &mut self.rng
    }

    /// Training-mode forward pass of the objective; parameters, running
    /// statistics and history are untouched (the noise stream advances).
    pub fn evaluate(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<LossBreakdown, TrainError> {
        Ok(self.forward(images, labels)?.2)
    }

    #[allow(clippy::type_complexity)]
    fn forward(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(Graph<T>, crate::nn::Var, LossBreakdown, StatsLog<T>), TrainError> {
        if labels.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let cfg = self.config;
        let bits = self.model.config().bits;
        let m = &self.model;
        let mut g = Graph::training();
        let mut log = Vec::new();
        let x = g.input(images.clone());
        let y = m.encoder_graph(&mut g, x, BnMode::Train, &mut log)?;
        let yc = clamp_features(&mut g, y);
        let (y_st, y_noise) = if cfg.bypass_quantizer {
            (yc, yc)
        } else {
            (
                quantize_surrogate(&mut g, yc, bits, SurrogateMode::StraightThrough, &mut self.rng)?,
                quantize_surrogate(&mut g, yc, bits, SurrogateMode::Noise, &mut self.rng)?,
            )
        };
        let x_hat = m.decoder_graph(&mut g, y_st)?;
        let d = g.mse(x_hat, x)?;
        let density = m.density_graph(&mut g);
        let r = g.density_rate(y_noise, density, T::lit(grid_step(bits)))?;
        let head_in = match cfg.variant {
            Variant::PreSemantic => yc,
            Variant::PostSemantic => y_st,
        };
        let logits = m.head_graph(&mut g, head_in, BnMode::Train, &mut log)?;
        let sem = g.softmax_cross_entropy(logits, labels)?;
        let wd = g.scale(d, T::lit(cfg.lambda1));
        let ws = g.scale(sem, T::lit(cfg.lambda2));
        let rd = g.add(r, wd)?;
        let loss = g.add(rd, ws)?;
        let scalar = |v| g.value(v).data()[0].as_f64();
        let parts = total_loss(scalar(r), scalar(d), scalar(sem), cfg.lambda1, cfg.lambda2);
        Ok((g, loss, parts, log))
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left as they were before the call.
    pub fn step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<LossBreakdown, TrainError> {
        let step = self.step_count();
        let (g, loss, parts, log) = self.forward(images, labels)?;
        if !parts.is_finite() || !g.value(loss).is_finite() {
            return Err(TrainError::NonFinite { step, loss: parts });
        }
        let grads = g.backward(loss)?;
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteGradient(step));
        }
        self.adam.set_lr(self.config.lr_at(step));
        self.adam.step(self.model.params_mut(), &grads)?;
        self.model.update_running_stats(&log, self.config.bn_momentum);
        self.history.push(parts);
        Ok(parts)
    }

    /// Runs until `config.steps`, drawing batches from `next_batch`.
    /// `on_step` sees every recorded loss.
    pub fn run<F, C>(&mut self, mut next_batch: F, mut on_step: C) -> Result<(), TrainError>
    where
        F: FnMut(&mut CodecRng, usize) -> (Tensor<T>, Vec<usize>),
        C: FnMut(u64, &LossBreakdown, &Model<T>),
    {
        while self.step_count() < self.config.steps {
            let (images, labels) = next_batch(&mut self.rng, self.config.batch);
            let parts = self.step(&images, &labels)?;
            on_step(self.step_count() - 1, &parts, &self.model);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{RateConfig, RatePreset};
    use rand::Rng;

    #[test]
    fn total_loss_examples() {
        let l = total_loss(100.0, 0.01, 2.3, 1000.0, 10.0);
        assert!((l.total - 133.0).abs() < 1e-9);
        assert_eq!(total_loss(42.0, 0.5, 3.0, 0.0, 0.0).total, 42.0);
    }

    #[test]
    fn distortion_examples() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]);
        let h = Tensor::full(&[3, 2, 2], 0.5);
        assert_eq!(distortion(&x, &x).unwrap(), 0.0);
        assert_eq!(distortion(&x, &h).unwrap(), 0.25);
        assert_eq!(distortion(&h, &x).unwrap(), distortion(&x, &h).unwrap());
        assert!(distortion(&x, &Tensor::zeros(&[3, 2, 3])).is_err());
    }

    #[test]
    fn semantic_loss_examples() {
        assert_eq!(semantic_loss(&[0.0, 1.0], 1), 0.0);
        assert!((semantic_loss(&[0.1; 10], 4) - 2.302585).abs() < 1e-6);
        assert!((semantic_loss(&[0.25, 0.75], 1) - 0.287682).abs() < 1e-6);
        assert!((semantic_loss_from_logits(&[0.0, num_traits::Float::ln(3.0f64)], 1) - 0.287682).abs() < 1e-6);
        assert!(semantic_loss_from_logits(&[1e4, -1e4], 1).is_finite());
    }

    #[test]
    fn uniform_density_rate_is_eight_bits_per_element() {
        let d = DensityModel::<f64>::from_logits(&Tensor::zeros(&[2, 32]));
        let step = grid_step(6);
        let v = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 - 9.0) * step);
        assert!((rate_term(&v, &d, 6).unwrap() - 8.0 * 18.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_divides_by_five_twice() {
        let c = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.003);
        assert_eq!(c.lr_at(49), 0.003);
        assert!((c.lr_at(50) - 0.0006).abs() < 1e-15);
        assert!((c.lr_at(80) - 0.00012).abs() < 1e-15);
    }

    fn tiny_trainer(variant: Variant, bypass: bool) -> Trainer<f32> {
        let cfg = RateConfig::preset(RatePreset::Lo).with_channels(4);
        let model = Model::new(cfg, 3, &mut seeded(9)).unwrap();
        Trainer::new(
            model,
            TrainConfig {
                steps: 6,
                batch: 2,
                variant,
                bypass_quantizer: bypass,
                seed: 4,
                ..TrainConfig::default()
            },
        )
    }

    fn batches(rng: &mut CodecRng, n: usize) -> (Tensor<f32>, Vec<usize>) {
        let imgs = Tensor::from_fn(&[n, 3, 32, 32], |_| rng.gen::<f32>());
        let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
        (imgs, labels)
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let mut a = tiny_trainer(Variant::PostSemantic, false);
        let mut b = tiny_trainer(Variant::PostSemantic, false);
        a.run(batches, |_, _, _| {}).unwrap();
        b.run(batches, |_, _, _| {}).unwrap();
        assert_eq!(a.history(), b.history());
        assert_eq!(a.model, b.model);
        assert_eq!(a.history().len(), 6);
    }

    #[test]
    fn variants_agree_when_quantizer_is_bypassed() {
        let mut pre = tiny_trainer(Variant::PreSemantic, true);
        let mut post = tiny_trainer(Variant::PostSemantic, true);
        pre.run(batches, |_, _, _| {}).unwrap();
        post.run(batches, |_, _, _| {}).unwrap();
        assert_eq!(pre.history(), post.history());
        let mut pre = tiny_trainer(Variant::PreSemantic, false);
        let mut post = tiny_trainer(Variant::PostSemantic, false);
        pre.run(batches, |_, _, _| {}).unwrap();
        post.run(batches, |_, _, _| {}).unwrap();
        assert_ne!(pre.history(), post.history());
    }

    #[test]
    fn non_finite_input_aborts_and_keeps_parameters() {
        let mut t = tiny_trainer(Variant::PostSemantic, false);
        let (mut imgs, labels) = batches(&mut seeded(1), 2);
        t.step(&imgs, &labels).unwrap();
        let before = t.model.clone();
        imgs.data_mut()[5] = f32::NAN;
        assert!(t.step(&imgs, &labels).is_err());
        assert_eq!(t.model, before);
        assert_eq!(t.step_count(), 1);
    }
}
