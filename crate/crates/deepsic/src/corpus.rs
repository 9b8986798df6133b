//! Directory-per-class labeled corpora, stratified splits and patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use deepsic_core::rng::{seeded, CodecRng};
use deepsic_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::atomic::{write_atomic, AtomicWriteError};
use crate::image_io::{read_rgb8, ImageIoError, Rgb8};

pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {0} has no images")]
    Empty(PathBuf),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("no images in the {0:?} split")]
    EmptySplit(Split),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Write(#[from] AtomicWriteError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// One entry per sample.
    pub splits: Vec<Split>,
    pub seed: u64,
    /// Classes too small to give every split a sample.
    pub warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    v.sort();
    Ok(v)
}

impl LabeledCorpus {
    /// Indexes `root/<class>/*.{png,ppm}`; classes are the sorted directory
    /// names. Every sample starts in the train split.
    pub fn open(root: &Path) -> Result<Self, CorpusError> {
        let mut samples = Vec::new();
        let mut class_names = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
            if files.is_empty() {
                continue;
            }
            let class = class_names.len();
            class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
            samples.extend(files.into_iter().map(|path| Sample { path, class }));
        }
        if samples.is_empty() {
            return Err(CorpusError::Empty(root.to_path_buf()));
        }
        let splits = vec![Split::Train; samples.len()];
        Ok(Self {
            root: root.to_path_buf(),
            samples,
            class_names,
            splits,
            seed: 0,
            warnings: Vec::new(),
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-class stratified assignment. Each class is shuffled with one
    /// seeded stream, then cut at `round(f·n)` boundaries.
    pub fn split(mut self, fractions: [f64; 3], seed: u64) -> Result<Self, CorpusError> {
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Fractions(fractions));
        }
        let parts = fractions.iter().filter(|&&f| f > 0.0).count();
        let mut rng = seeded(seed);
        self.warnings.clear();
        for class in 0..self.classes() {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].class == class)
                .collect();
            idx.shuffle(&mut rng);
            let n = idx.len();
            if n < parts {
                self.warnings.push(format!(
                    "class {:?} has {n} samples for {parts} splits; later splits get none",
                    self.class_names[class]
                ));
            }
            let n_train = (fractions[0] * n as f64).round() as usize;
            let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
            for (k, &i) in idx.iter().enumerate() {
                self.splits[i] = if k < n_train {
                    Split::Train
                } else if k < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        self.seed = seed;
        Ok(self)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels_text(&self) -> String {
        self.class_names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i},{n}\n"))
            .collect()
    }

    pub fn write_labels(&self) -> Result<(), CorpusError> {
        write_atomic(&self.root.join(LABELS_FILE), self.labels_text().as_bytes())?;
        Ok(())
    }

    /// Decodes every image of a split into memory (8-bit).
    pub fn load(&self, split: Split) -> Result<ImageBank, CorpusError> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(CorpusError::EmptySplit(split));
        }
        let images = idx
            .par_iter()
            .map(|&i| read_rgb8(&self.samples[i].path))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = idx.iter().map(|&i| self.samples[i].class).collect();
        let paths = idx.iter().map(|&i| self.samples[i].path.clone()).collect();
        Ok(ImageBank { images, labels, paths })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Horizontal mirror with probability ½.
    Flip,
}

/// Decoded images of one split with their labels.
#[derive(Clone, Debug, Default)]
pub struct ImageBank {
    pub images: Vec<Rgb8>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl ImageBank {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Random `size×size` crops with labels. Images smaller than `size` are
    /// first enlarged by nearest-neighbor sampling.
    pub fn sample_patches(
        &self,
        size: usize,
        count: usize,
        rng: &mut CodecRng,
        augment: Augment,
    ) -> Result<(Tensor<f32>, Vec<usize>), CorpusError> {
        if self.is_empty() {
            return Err(CorpusError::EmptySplit(Split::Train));
        }
        let plane = size * size;
        let mut data = vec![0.0f32; count * 3 * plane];
        let mut labels = Vec::with_capacity(count);
        for (n, out) in data.chunks_exact_mut(3 * plane).enumerate().take(count) {
            let k = rng.gen_range(0..self.len());
            let img = &self.images[k];
            let (h, w) = (img.height.max(size), img.width.max(size));
            let oy = rng.gen_range(0..=h - size);
            let ox = rng.gen_range(0..=w - size);
            let flip = augment == Augment::Flip && rng.gen::<bool>();
            for y in 0..size {
                let sy = (oy + y) * img.height / h;
                for x in 0..size {
                    let cx = if flip { size - 1 - x } else { x };
                    let sx = (ox + cx) * img.width / w;
                    let px = &img.data[(sy * img.width + sx) * 3..][..3];
                    for c in 0..3 {
                        out[c * plane + y * size + x] = px[c] as f32 / 255.0;
                    }
                }
            }
            labels.push(self.labels[k]);
            debug_assert_eq!(labels.len(), n + 1);
        }
        Ok((Tensor::new(&[count, 3, size, size], data).expect("batch shape"), labels))
    }
}
