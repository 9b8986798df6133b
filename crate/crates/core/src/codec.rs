//! Image → stream → image, for either semantic variant.

use alloc::vec::Vec;

use thiserror::Error;

use crate::bitstream::{BitstreamError, CompressedBlob, SemanticPayload};
use crate::networks::{Model, ModelError, SemanticResult, Variant};
use crate::quantizer::{dequantize, quantize, QuantError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("expected a 3×H×W image, got shape {0:?}")]
    ImageShape(Vec<usize>),
    #[error("image {0}×{1} exceeds the 65535-pixel side limit")]
    TooLarge(usize, usize),
    #[error("model stride configuration is not a named preset")]
    UnnamedPreset,
    #[error("stream does not match the model: {0}")]
    ModelMismatch(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads a `C×H×W` image on the bottom and right by reflection.
pub fn pad_reflect(img: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let [c, h, w] = *img.shape() else {
        panic!("pad_reflect needs C×H×W");
    };
    if (h, w) == (height, width) {
        return img.clone();
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = &src[(ch * h + reflect(y, h)) * w..][..w];
            out.extend((0..width).map(|x| row[reflect(x, w)]));
        }
    }
    Tensor::new(&[c, height, width], out).expect("padded shape")
}

/// Top-left `height×width` window of a `C×H×W` image.
pub fn crop(img: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let [c, h, w] = *img.shape() else {
        panic!("crop needs C×H×W");
    };
    if (h, w) == (height, width) {
        return img.clone();
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            out.extend_from_slice(&src[(ch * h + y) * w..][..width]);
        }
    }
    Tensor::new(&[c, height, width], out).expect("cropped shape")
}

/// Encodes a `3×H×W` image in `[0, 1]`. Sizes that are not a multiple of the
/// stride product are padded and the original size is recorded.
pub fn compress(model: &Model<f32>, image: &Tensor<f32>, variant: Variant) -> Result<CompressedBlob, CodecError> {
    let &[3, h, w] = image.shape() else {
        return Err(CodecError::ImageShape(image.shape().to_vec()));
    };
    let cfg = model.config();
    let preset = cfg.named_preset().ok_or(CodecError::UnnamedPreset)?;
    let f = cfg.stride_product();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    if ph > u16::MAX as usize || pw > u16::MAX as usize || h == 0 || w == 0 {
        return Err(CodecError::TooLarge(h, w));
    }
    let padded = pad_reflect(image, ph, pw);
    let features = model.extract_features(&padded)?;
    let codes = quantize(&features, cfg.bits)?;
    let semantic = match variant {
        Variant::PreSemantic => Some(SemanticPayload::from_result(&model.classify(&features)?)),
        Variant::PostSemantic => None,
    };
    let classes = u16::try_from(model.classes()).map_err(|_| CodecError::ModelMismatch("class count"))?;
    let blob = CompressedBlob {
        variant,
        width: pw as u16,
        height: ph as u16,
        preset,
        bits: cfg.bits,
        classes,
        semantic,
        original: ((ph, pw) != (h, w)).then_some((w as u16, h as u16)),
        features: codes,
    };
    blob.validate()?;
    Ok(blob)
}

/// Reconstruction plus the class decision of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub image: Tensor<f32>,
    /// Stored class record for pre-semantic streams, decode-time
    /// classification otherwise.
    pub semantic: SemanticResult,
}

pub fn check_compatible(model: &Model<f32>, blob: &CompressedBlob) -> Result<(), CodecError> {
    let cfg = model.config();
    if cfg.named_preset() != Some(blob.preset) {
        return Err(CodecError::ModelMismatch("rate preset"));
    }
    if cfg.bits != blob.bits {
        return Err(CodecError::ModelMismatch("quantizer bits"));
    }
    if cfg.feature_channels() != blob.feature_channels() {
        return Err(CodecError::ModelMismatch("feature channels"));
    }
    if model.classes() != blob.classes as usize {
        return Err(CodecError::ModelMismatch("class count"));
    }
    Ok(())
}

pub fn decompress(model: &Model<f32>, blob: &CompressedBlob) -> Result<Decoded, CodecError> {
    check_compatible(model, blob)?;
    let y_hat = dequantize::<f32>(&blob.features);
    let image = model.reconstruct(&y_hat)?;
    let (ow, oh) = blob.output_size();
    let image = crop(&image, oh as usize, ow as usize);
    let semantic = match &blob.semantic {
        Some(s) => semantic_from_payload(s, model.classes()),
        None => model.classify(&y_hat)?,
    };
    Ok(Decoded { image, semantic })
}

/// Expands a stored class record; classes outside the top list share the
/// remaining probability mass evenly.
pub fn semantic_from_payload(s: &SemanticPayload, classes: usize) -> SemanticResult {
    let top = s.top();
    let listed: f64 = top.iter().map(|t| t.1).sum();
    let rest = classes.saturating_sub(top.len());
    let fill = if rest > 0 {
        (1.0 - listed).max(0.0) / rest as f64
    } else {
        0.0
    };
    let mut probabilities = alloc::vec![fill; classes];
    for &(id, p) in &top {
        probabilities[id] = p;
    }
    SemanticResult {
        class_id: s.class_id as usize,
        probabilities,
        top,
    }
}
