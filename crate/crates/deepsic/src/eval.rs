//! Corpus evaluation through the full codec, parallel over images.

use std::path::{Path, PathBuf};

use deepsic_core::codec::{compress, CodecError};
use deepsic_core::density::{feature_bits, DensityModel};
use deepsic_core::metrics::{evaluate_image, EvalError, MetricsError, RDPoint, RdAccumulator};
use deepsic_core::networks::{Model, Variant};
use deepsic_core::quantizer::dequantize;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{CorpusError, LabeledCorpus, Split};
use crate::image_io::{read_rgb8, Rgb8};
use crate::train::SPLIT_FRACTIONS;

pub const THREADS_ENV: &str = "DSIC_THREADS";

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("model has no named rate preset")]
    UnnamedPreset,
    #[error("{THREADS_ENV} must be a positive integer, got {0:?}")]
    Threads(String),
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// Images to score, with labels when the corpus is labeled.
#[derive(Clone, Debug, Default)]
pub struct EvalImages {
    pub images: Vec<Rgb8>,
    pub labels: Vec<Option<usize>>,
    pub paths: Vec<PathBuf>,
}

impl EvalImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// A directory of class subdirectories yields the requested split; a
    /// directory of image files yields every file, unlabeled.
    pub fn open(root: &Path, split: Split, split_seed: u64) -> Result<Self, CorpusError> {
        let flat: Vec<PathBuf> = {
            let mut v: Vec<PathBuf> = std::fs::read_dir(root)
                .map_err(|source| CorpusError::Io {
                    path: root.to_path_buf(),
                    source,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
                .collect();
            v.sort();
            v
        };
        if !flat.is_empty() {
            let images = flat.par_iter().map(|p| read_rgb8(p)).collect::<Result<Vec<_>, _>>()?;
            return Ok(Self {
                labels: vec![None; images.len()],
                images,
                paths: flat,
            });
        }
        let bank = LabeledCorpus::open(root)?
            .split(SPLIT_FRACTIONS, split_seed)?
            .load(split)?;
        Ok(Self {
            labels: bank.labels.into_iter().map(Some).collect(),
            images: bank.images,
            paths: bank.paths,
        })
    }
}

/// Thread pool sized by `DSIC_THREADS`, or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool, EvaluateError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or(EvaluateError::Threads(v))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

/// Per-image measurements kept for reports and fidelity checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub path: PathBuf,
    pub bytes: usize,
    pub payload_bytes: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub predicted: usize,
    pub top: Vec<usize>,
    pub label: Option<usize>,
}

pub fn score_images(
    model: &Model<f32>,
    set: &EvalImages,
    variant: Variant,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ImageScore>, EvaluateError> {
    pool.install(|| {
        (0..set.len())
            .into_par_iter()
            .map(|i| {
                let e = evaluate_image(model, &set.images[i].to_tensor(), variant).map_err(|source| {
                    EvaluateError::Image {
                        path: set.paths[i].clone(),
                        source,
                    }
                })?;
                Ok(ImageScore {
                    path: set.paths[i].clone(),
                    bytes: e.bytes,
                    payload_bytes: e.payload_bytes,
                    bpp: e.bpp,
                    psnr: e.psnr,
                    ms_ssim: e.ms_ssim,
                    predicted: e.semantic.class_id,
                    top: e.semantic.top.iter().map(|t| t.0).collect(),
                    label: set.labels[i],
                })
            })
            .collect()
    })
}

/// Means in image order, so the result does not depend on thread count.
pub fn summarize(model: &Model<f32>, variant: Variant, scores: &[ImageScore]) -> Result<RDPoint, EvaluateError> {
    let preset = model.config().named_preset().ok_or(EvaluateError::UnnamedPreset)?;
    let mut acc = RdAccumulator::default();
    for s in scores {
        acc.add(s.bpp, s.psnr, s.ms_ssim);
        if let Some(l) = s.label {
            acc.accuracy.record_ids(s.predicted, &s.top, l);
        }
    }
    Ok(acc.finish(preset, variant)?)
}

pub fn evaluate_set(
    model: &Model<f32>,
    set: &EvalImages,
    variant: Variant,
    pool: &rayon::ThreadPool,
) -> Result<(RDPoint, Vec<ImageScore>), EvaluateError> {
    let scores = score_images(model, set, variant, pool)?;
    Ok((summarize(model, variant, &scores)?, scores))
}

/// Density-model estimate of an image's payload bits next to the
/// entropy coder's actual payload bits.
pub fn rate_fidelity(model: &Model<f32>, image: &Rgb8) -> Result<(f64, f64), CodecError> {
    let blob = compress(model, &image.to_tensor(), Variant::PostSemantic)?;
    let y_hat = dequantize::<f64>(&blob.features);
    let density = DensityModel::<f64>::from_logits(&model.density_layer().weight.cast());
    let estimate = feature_bits(&density, &y_hat, blob.bits).unwrap_or(f64::INFINITY);
    let coded = deepsic_core::entropy::encode_codes(&blob.features).map_err(|e| CodecError::Bitstream(e.into()))?;
    Ok((
        estimate,
        ((coded.len() - deepsic_core::entropy::PAYLOAD_OVERHEAD) * 8) as f64,
    ))
}
