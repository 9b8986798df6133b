//! Fixed-point feature quantization `Q(v) = ceil(2^(B-1)·v) / 2^(B-1)` on the
//! clamped range `[-4, 4]`, its grid dequantization, and the training-time
//! surrogates.

use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::nn::{Graph, NnError, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CLAMP_LIMIT: f64 = 4.0;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("quantizer bits must be in {MIN_BITS}..={MAX_BITS}, got {0}")]
    InvalidBits(u8),
    #[error("non-finite feature value at index {0}")]
    NonFinite(usize),
    #[error("code {code} at index {index} outside ±{limit}")]
    CodeOutOfRange { index: usize, code: i32, limit: i32 },
    #[error("feature map shape {0:?} is not C×H×W")]
    Shape(Vec<usize>),
    #[error("quantization surrogate requested outside training")]
    NotTraining,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Grid spacing `2^(1-B)`.
pub fn grid_step(bits: u8) -> f64 {
    libm_pow2(1 - bits as i32)
}

/// Codes per unit, `2^(B-1)`.
pub fn grid_scale(bits: u8) -> f64 {
    libm_pow2(bits as i32 - 1)
}

/// Largest code magnitude after clamping, `2^(B+1)`.
pub fn code_limit(bits: u8) -> i32 {
    1 << (bits as i32 + 1)
}

fn libm_pow2(e: i32) -> f64 {
    num_traits::Float::powi(2.0f64, e)
}

pub fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

/// Code of one value: clamp to the codec range, then round up onto the grid.
#[inline]
pub fn quantize_code<T: Real>(v: T, bits: u8) -> i32 {
    let lim = T::lit(CLAMP_LIMIT);
    let clamped = v.max(-lim).min(lim);
    (clamped * T::lit(grid_scale(bits))).ceil().to_i32().unwrap()
}

#[inline]
pub fn quantize_value<T: Real>(v: T, bits: u8) -> T {
    T::lit(quantize_code(v, bits) as f64 / grid_scale(bits))
}

/// Integer codes of a `C×H×W` feature map plus the bit depth `B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedFeatureMap {
    shape: [usize; 3],
    codes: Vec<i32>,
    bits: u8,
}

impl QuantizedFeatureMap {
    pub fn new(shape: [usize; 3], codes: Vec<i32>, bits: u8) -> Result<Self, QuantError> {
        check_bits(bits)?;
        if shape.iter().product::<usize>() != codes.len() {
            return Err(QuantError::Shape(shape.to_vec()));
        }
        let limit = code_limit(bits);
        if let Some((index, &code)) = codes.iter().enumerate().find(|(_, c)| c.abs() > limit) {
            return Err(QuantError::CodeOutOfRange { index, code, limit });
        }
        Ok(Self { shape, codes, bits })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Quantizes a `C×H×W` feature map.
pub fn quantize<T: Real>(features: &Tensor<T>, bits: u8) -> Result<QuantizedFeatureMap, QuantError> {
    check_bits(bits)?;
    let [c, h, w] = *features.shape() else {
        return Err(QuantError::Shape(features.shape().to_vec()));
    };
    let mut codes = Vec::with_capacity(features.len());
    for (i, &v) in features.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(i));
        }
        codes.push(quantize_code(v, bits));
    }
    Ok(QuantizedFeatureMap {
        shape: [c, h, w],
        codes,
        bits,
    })
}

/// Grid values `code / 2^(B-1)`.
pub fn dequantize<T: Real>(q: &QuantizedFeatureMap) -> Tensor<T> {
    let scale = grid_scale(q.bits);
    let data = q.codes.iter().map(|&c| T::lit(c as f64 / scale)).collect();
    Tensor::new(&q.shape, data).expect("shape checked at construction")
}

/// Elementwise quantize-dequantize of any tensor (batch or single map).
pub fn quantize_tensor<T: Real>(t: &Tensor<T>, bits: u8) -> Tensor<T> {
    t.map(|v| quantize_value(v, bits))
}

/// Clamps to the codec range; gradient passes inside the range.
pub fn clamp_features<T: Real>(graph: &mut Graph<T>, x: Var) -> Var {
    graph.clamp(x, T::lit(-CLAMP_LIMIT), T::lit(CLAMP_LIMIT))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateMode {
    /// `min(v + u, 4)`, `u ~ U[0, 2^(1-B))`: the support of the ceil error,
    /// capped at the largest reachable code.
    Noise,
    /// Quantized values forward, identity gradient backward.
    StraightThrough,
}

/// Differentiable stand-in for quantization during training.
pub fn quantize_surrogate<T: Real, R: Rng + ?Sized>(
    graph: &mut Graph<T>,
    x: Var,
    bits: u8,
    mode: SurrogateMode,
    rng: &mut R,
) -> Result<Var, QuantError> {
    check_bits(bits)?;
    if !graph.is_training() {
        return Err(QuantError::NotTraining);
    }
    let value = match mode {
        SurrogateMode::StraightThrough => quantize_tensor(graph.value(x), bits),
        SurrogateMode::Noise => {
            let step = grid_step(bits);
            let cap = T::lit(CLAMP_LIMIT);
            let src = graph.value(x);
            let data = src
                .data()
                .iter()
                .map(|&v| (v + T::lit(step * rng.gen::<f64>())).min(cap))
                .collect();
            Tensor::new(src.shape(), data)?
        }
    };
    Ok(graph.pass_through(x, value)?)
}
