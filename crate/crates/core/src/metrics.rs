//! PSNR, luma MS-SSIM, bits per pixel and accuracy aggregation.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use thiserror::Error;

use crate::bitstream::serialize_with_layout;
use crate::codec::{compress, decompress, CodecError};
use crate::networks::{Model, RatePreset, SemanticResult, Variant};
use crate::real::Real;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {height}×{width} is smaller than the {window}×{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("nothing to evaluate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn check_same<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(), MetricsError> {
    if x.shape() != y.shape() || x.is_empty() {
        return Err(MetricsError::Shape(x.shape().to_vec(), y.shape().to_vec()));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`, capped at 100 dB (identical images hit the cap).
pub fn psnr<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, peak: f64) -> Result<f64, MetricsError> {
    check_same(x, x_hat)?;
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// BT.601 luma of a `3×H×W` image; a `1×H×W` image is taken as luma already.
pub fn luma<T: Real>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize), MetricsError> {
    match *img.shape() {
        [3, h, w] => {
            let d = img.data();
            let n = h * w;
            let y = (0..n)
                .map(|i| 0.299 * d[i].as_f64() + 0.587 * d[n + i].as_f64() + 0.114 * d[2 * n + i].as_f64())
                .collect();
            Ok((y, h, w))
        }
        [1, h, w] => Ok((img.data().iter().map(|v| v.as_f64()).collect(), h, w)),
        _ => Err(MetricsError::Shape(img.shape().to_vec(), vec![3])),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW - 1) as f64 / 2.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let n = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let r = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&r[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_scale(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * x + y * y).collect();
    let (ma, _, _) = filter_valid(a, h, w, k);
    let (mb, _, _) = filter_valid(b, h, w, k);
    let (mp, _, _) = filter_valid(&prod, h, w, k);
    let (ms, oh, ow) = filter_valid(&sq, h, w, k);
    let mut ssim = 0.0;
    let mut cs = 0.0;
    for i in 0..oh * ow {
        let num0 = 2.0 * ma[i] * mb[i];
        let den0 = ma[i] * ma[i] + mb[i] * mb[i];
        let lum = (num0 + c1) / (den0 + c1);
        let c = (2.0 * mp[i] - num0 + c2) / (ms[i] - den0 + c2);
        ssim += lum * c;
        cs += c;
    }
    let n = (oh * ow) as f64;
    (ssim / n, cs / n)
}

/// 2×2 average pooling; odd sizes are first padded by mirroring the last
/// row/column.
fn downsample(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + h % 2, w + w % 2);
    let at = |y: usize, x: usize| src[y.min(h - 1) * w + x.min(w - 1)];
    let (oh, ow) = (ph / 2, pw / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] =
                0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
        }
    }
    (out, oh, ow)
}

/// Number of scales whose image still covers the window, at most 5.
pub fn ms_ssim_scales(height: usize, width: usize) -> usize {
    let (mut h, mut w) = (height, width);
    let mut s = 0;
    while s < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        s += 1;
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    s
}

/// MS-SSIM of two single-channel images with values in `[0, 1]`. Per-scale
/// terms are clamped at zero; with fewer than five scales the weights of
/// the scales used are renormalized to sum to one.
pub fn ms_ssim_gray(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.len() != height * width {
        return Err(MetricsError::Shape(vec![a.len()], vec![b.len()]));
    }
    let scales = ms_ssim_scales(height, width);
    if scales == 0 {
        return Err(MetricsError::TooSmall {
            height,
            width,
            window: SSIM_WINDOW,
        });
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let k = gaussian_window();
    let (mut x, mut y, mut h, mut w) = (a.to_vec(), b.to_vec(), height, width);
    let mut value = 1.0;
    for (s, &wt) in weights.iter().enumerate() {
        if s > 0 {
            let (nx, nh, nw) = downsample(&x, h, w);
            y = downsample(&y, h, w).0;
            (x, h, w) = (nx, nh, nw);
        }
        let (ssim, cs) = ssim_scale(&x, &y, h, w, &k);
        let term = if s + 1 == scales { ssim } else { cs };
        value *= term.max(0.0).powf(wt / wsum);
    }
    Ok(value)
}

/// MS-SSIM on the luma of two `3×H×W` images in `[0, 1]`.
pub fn ms_ssim<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64, MetricsError> {
    check_same(x, x_hat)?;
    let (a, h, w) = luma(x)?;
    let (b, _, _) = luma(x_hat)?;
    ms_ssim_gray(&a, &b, h, w)
}

/// Stream size in bits over pixel count.
pub fn bpp(blob_bytes: usize, width: usize, height: usize) -> f64 {
    (blob_bytes * 8) as f64 / (width * height) as f64
}

/// Top-1 / top-5 hit counting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub top1: usize,
    pub top5: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn record(&mut self, result: &SemanticResult, label: usize) {
        self.total += 1;
        self.top1 += (result.class_id == label) as usize;
        self.top5 += result.in_top(label) as usize;
    }

    pub fn record_ids(&mut self, predicted: usize, top: &[usize], label: usize) {
        self.total += 1;
        self.top1 += (predicted == label) as usize;
        self.top5 += top.contains(&label) as usize;
    }

    pub fn top1_rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.top1 as f64 / self.total as f64)
    }

    pub fn top5_rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.top5 as f64 / self.total as f64)
    }
}

/// One point of a rate-distortion(-accuracy) curve, averaged over images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDPoint {
    pub preset: RatePreset,
    pub variant: Variant,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

/// Running means for an [`RDPoint`].
#[derive(Clone, Debug, Default)]
pub struct RdAccumulator {
    bpp: f64,
    psnr: f64,
    ms_ssim: f64,
    images: usize,
    pub accuracy: Accuracy,
}

impl RdAccumulator {
    pub fn add(&mut self, bpp: f64, psnr: f64, ms_ssim: f64) {
        self.bpp += bpp;
        self.psnr += psnr;
        self.ms_ssim += ms_ssim;
        self.images += 1;
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn finish(&self, preset: RatePreset, variant: Variant) -> Result<RDPoint, MetricsError> {
        if self.images == 0 {
            return Err(MetricsError::Empty);
        }
        let n = self.images as f64;
        Ok(RDPoint {
            preset,
            variant,
            bpp: self.bpp / n,
            psnr: self.psnr / n,
            ms_ssim: self.ms_ssim / n,
            top1: self.accuracy.top1_rate(),
            top5: self.accuracy.top5_rate(),
        })
    }
}

/// Measurements of one image through the full codec.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub bytes: usize,
    pub payload_bytes: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub semantic: SemanticResult,
    pub reconstruction: Tensor<f32>,
}

/// Compresses, serializes, decodes and scores one `3×H×W` image.
pub fn evaluate_image(model: &Model<f32>, image: &Tensor<f32>, variant: Variant) -> Result<ImageEval, EvalError> {
    let blob = compress(model, image, variant)?;
    let (bytes, layout) = serialize_with_layout(&blob).map_err(CodecError::from)?;
    let decoded = decompress(model, &blob)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Ok(ImageEval {
        bytes: bytes.len(),
        payload_bytes: layout.payload,
        bpp: bpp(bytes.len(), w, h),
        psnr: psnr(image, &decoded.image, 1.0)?,
        ms_ssim: ms_ssim(image, &decoded.image)?,
        semantic: decoded.semantic,
        reconstruction: decoded.image,
    })
}

/// Mean bpp / PSNR / MS-SSIM and, for labelled images, accuracy.
pub fn evaluate_corpus<I>(model: &Model<f32>, samples: I, variant: Variant) -> Result<RDPoint, EvalError>
where
    I: IntoIterator<Item = (Tensor<f32>, Option<usize>)>,
{
    let preset = model.config().named_preset().ok_or(CodecError::UnnamedPreset)?;
    let mut acc = RdAccumulator::default();
    for (image, label) in samples {
        let e = evaluate_image(model, &image, variant)?;
        acc.add(e.bpp, e.psnr, e.ms_ssim);
        if let Some(l) = label {
            acc.accuracy.record(&e.semantic, l);
        }
    }
    Ok(acc.finish(preset, variant)?)
}
