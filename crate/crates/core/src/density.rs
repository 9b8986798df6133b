//! Per-channel piecewise-linear cumulative density over the clamped feature
//! range, used to estimate the code length of quantized features.
//!
//! The CDF is parameterized by interval logits: each of the `J` equal-width
//! intervals between `-CLAMP` and `+CLAMP` receives a probability mass
//! `(1 - a)·softmax(logits)_j + a/J`, so the knot values are non-decreasing
//! after any update and every interval keeps a strictly positive density.

use alloc::vec;
use alloc::vec::Vec;

use crate::quantizer::{grid_step, CLAMP_LIMIT};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DENSITY_INTERVALS: usize = 32;
pub const DENSITY_KNOTS: usize = DENSITY_INTERVALS + 1;
pub const PROBABILITY_FLOOR: f64 = 1e-9;
/// Uniform mixing weight; keeps the smallest half-bin mass above the floor.
pub const UNIFORM_MIX: f64 = 1e-4;

/// Evaluation tables derived from interval logits (`channels × intervals`).
#[derive(Clone, Debug)]
pub struct DensityModel<T: Real = f32> {
    channels: usize,
    intervals: usize,
    softmax: Vec<T>,
    masses: Vec<T>,
    /// `channels × (intervals + 1)` knot CDF values.
    knots: Vec<T>,
    lo: T,
    width: T,
}

impl<T: Real> DensityModel<T> {
    pub fn from_logits(logits: &Tensor<T>) -> Self {
        let [channels, intervals] = *logits.shape() else {
            panic!("density logits must be channels×intervals");
        };
        let mix = T::lit(UNIFORM_MIX);
        let uniform = mix / T::lit(intervals as f64);
        let softmax = crate::nn::softmax(logits).expect("finite density logits").into_data();
        let masses: Vec<T> = softmax.iter().map(|&s| (T::one() - mix) * s + uniform).collect();
        let mut knots = vec![T::zero(); channels * (intervals + 1)];
        for c in 0..channels {
            let row = &masses[c * intervals..(c + 1) * intervals];
            let k = &mut knots[c * (intervals + 1)..(c + 1) * (intervals + 1)];
            let total: T = row.iter().copied().sum();
            let mut acc = T::zero();
            for (j, &m) in row.iter().enumerate() {
                acc += m;
                k[j + 1] = acc / total;
            }
            k[intervals] = T::one();
        }
        let lo = T::lit(-CLAMP_LIMIT);
        Self {
            channels,
            intervals,
            softmax,
            masses,
            knots,
            lo,
            width: T::lit(2.0 * CLAMP_LIMIT / intervals as f64),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn knot_values(&self, channel: usize) -> &[T] {
        let k = self.intervals + 1;
        &self.knots[channel * k..(channel + 1) * k]
    }

    /// Interval index containing `t` and its fractional position, or `None`
    /// outside `[lo, hi)`.
    #[inline]
    fn locate(&self, t: T) -> Option<(usize, T)> {
        let pos = (t - self.lo) / self.width;
        if !(pos >= T::zero()) || pos >= T::lit(self.intervals as f64) {
            return None;
        }
        let j = pos.floor().to_usize().unwrap().min(self.intervals - 1);
        Some((j, pos - T::lit(j as f64)))
    }

    pub fn cdf(&self, channel: usize, t: T) -> T {
        let knots = self.knot_values(channel);
        if t <= self.lo {
            return T::zero();
        }
        match self.locate(t) {
            Some((j, frac)) => knots[j] + self.masses[channel * self.intervals + j] * frac,
            None => T::one(),
        }
    }

    pub fn pdf(&self, channel: usize, t: T) -> T {
        match self.locate(t) {
            Some((j, _)) => self.masses[channel * self.intervals + j] / self.width,
            None => T::zero(),
        }
    }

    /// Mass of the quantization bin centred on `center` for grid step `step`.
    pub fn bin_probability(&self, channel: usize, center: T, step: T) -> T {
        let h = step * T::lit(0.5);
        self.cdf(channel, center + h) - self.cdf(channel, center - h)
    }

    /// Code length in bits of one value, or `None` if its bin mass is below
    /// the probability floor.
    pub fn bits(&self, channel: usize, center: T, step: T) -> Option<T> {
        let p = self.bin_probability(channel, center, step);
        (p >= T::lit(PROBABILITY_FLOOR)).then(|| -p.log2())
    }

    /// Coefficient of interval mass `j` in `cdf(t)`.
    #[inline]
    fn mass_coefficient(&self, t: T, j: usize) -> T {
        if t <= self.lo {
            return T::zero();
        }
        match self.locate(t) {
            Some((idx, frac)) => {
                if j < idx {
                    T::one()
                } else if j == idx {
                    frac
                } else {
                    T::zero()
                }
            }
            None => T::one(),
        }
    }

    /// Adds `scale · ∂P/∂mass_j` for the bin centred at `center` into `dmass`.
    pub(crate) fn accumulate_mass_grad(&self, center: T, step: T, scale: T, dmass: &mut [T]) {
        let h = step * T::lit(0.5);
        let (l, u) = (center - h, center + h);
        let first = self
            .locate(l)
            .map_or(if l < self.lo { 0 } else { self.intervals }, |(j, _)| j);
        let last = self
            .locate(u)
            .map_or(if u < self.lo { 0 } else { self.intervals - 1 }, |(j, _)| j);
        if first >= self.intervals {
            return;
        }
        for (j, d) in dmass.iter_mut().enumerate().take(last + 1).skip(first) {
            *d += scale * (self.mass_coefficient(u, j) - self.mass_coefficient(l, j));
        }
    }

    /// Chain rule from interval masses to logits for one channel.
    pub(crate) fn mass_grad_to_logits(&self, channel: usize, dmass: &[T], dlogits: &mut [T]) {
        let s = &self.softmax[channel * self.intervals..(channel + 1) * self.intervals];
        let keep = T::one() - T::lit(UNIFORM_MIX);
        let dot: T = s.iter().zip(dmass).map(|(&a, &b)| a * b).sum();
        for ((dz, &sk), &gk) in dlogits.iter_mut().zip(s).zip(dmass) {
            *dz += keep * sk * (gk - dot);
        }
    }
}

/// Rate in bits of a quantized feature map (`C×H×W`) under `model`: the sum of
/// `-log2 P(value)` over every element.
pub fn feature_bits<T: Real>(model: &DensityModel<T>, values: &Tensor<T>, bits: u8) -> Result<T, (usize, T)> {
    let [_, c, h, w] = values.nchw().expect("feature map");
    assert_eq!(c, model.channels(), "density channels");
    let step = T::lit(grid_step(bits));
    let plane = h * w;
    let mut total = T::zero();
    for (i, &v) in values.data().iter().enumerate() {
        let ch = (i / plane) % c;
        match model.bits(ch, v, step) {
            Some(b) => total += b,
            None => return Err((ch, v)),
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_model_costs_eight_bits_per_element_at_six_bits() {
        let m = DensityModel::<f64>::from_logits(&Tensor::zeros(&[2, DENSITY_INTERVALS]));
        let step = grid_step(6);
        for code in -120..=120 {
            let v = code as f64 * step;
            let b = m.bits(1, v, step).unwrap();
            assert!((b - 8.0).abs() < 1e-9, "{code}: {b}");
        }
    }

    #[test]
    fn knots_are_monotone_and_pinned() {
        let logits = Tensor::<f64>::from_fn(&[3, DENSITY_INTERVALS], |i| ((i * 7919) % 13) as f64 - 6.0);
        let m = DensityModel::from_logits(&logits);
        for c in 0..3 {
            let k = m.knot_values(c);
            assert_eq!(k[0], 0.0);
            assert_eq!(k[DENSITY_INTERVALS], 1.0);
            assert!(k.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(m.cdf(c, -5.0), 0.0);
            assert_eq!(m.cdf(c, 4.0), 1.0);
        }
    }

    #[test]
    fn extreme_logits_stay_above_floor() {
        let mut logits = Tensor::<f64>::full(&[1, DENSITY_INTERVALS], -200.0);
        logits.data_mut()[5] = 200.0;
        let m = DensityModel::from_logits(&logits);
        let step = grid_step(8);
        for code in -512..=512 {
            assert!(m.bits(0, code as f64 * step, step).is_some());
        }
    }
}
