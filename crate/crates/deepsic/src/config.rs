//! Training run description in `key = value` text form.
//!
//! Blank lines and `#` comments are ignored. Relative paths are resolved
//! against the directory holding the file.

use std::path::{Path, PathBuf};

use deepsic_core::networks::{RateConfig, RatePreset, Variant, DEFAULT_BITS, DEFAULT_CHANNELS};
use deepsic_core::training::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub classes: usize,
    pub preset: RatePreset,
    pub channels: usize,
    pub bits: u8,
    pub patch: usize,
    pub train: TrainConfig,
    /// Seed of the train/val/test split, kept apart from the training seed
    /// so evaluation can rebuild the same test set.
    pub split_seed: u64,
    pub augment: bool,
    pub out: PathBuf,
    pub loss_csv: PathBuf,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl RunConfig {
    pub fn rate_config(&self) -> RateConfig {
        RateConfig::preset(self.preset)
            .with_channels(self.channels)
            .with_bits(self.bits)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut corpus = None;
        let mut classes = None;
        let mut cfg = Self {
            corpus: PathBuf::new(),
            classes: 0,
            preset: RatePreset::Mid,
            channels: DEFAULT_CHANNELS,
            bits: DEFAULT_BITS,
            patch: 128,
            train: TrainConfig::default(),
            split_seed: 0,
            augment: true,
            out: PathBuf::from("model.dsicw"),
            loss_csv: PathBuf::from("loss.csv"),
            checkpoint_every: 0,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ConfigError::Line { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            macro_rules! num {
                () => {
                    value
                        .parse()
                        .map_err(|_| err(format!("{key}: cannot parse {value:?}")))?
                };
            }
            let t = &mut cfg.train;
            match key {
                "corpus" => corpus = Some(base.join(value)),
                "K" | "classes" => classes = Some(num!()),
                "preset" => {
                    cfg.preset = RatePreset::from_name(value).ok_or_else(|| err(format!("unknown preset {value:?}")))?
                }
                "variant" => {
                    t.variant = Variant::from_name(value).ok_or_else(|| err(format!("unknown variant {value:?}")))?
                }
                "channels" => cfg.channels = num!(),
                "bits" => cfg.bits = num!(),
                "patch" => cfg.patch = num!(),
                "lambda1" => t.lambda1 = num!(),
                "lambda2" => t.lambda2 = num!(),
                "lr" => t.lr = num!(),
                "batch" => t.batch = num!(),
                "steps" => t.steps = num!(),
                "seed" => t.seed = num!(),
                "bn_momentum" => t.bn_momentum = num!(),
                "bypass_quantizer" => t.bypass_quantizer = num!(),
                "split_seed" => cfg.split_seed = num!(),
                "augment" => cfg.augment = num!(),
                "out" => cfg.out = base.join(value),
                "loss_csv" => cfg.loss_csv = base.join(value),
                "checkpoint_every" => cfg.checkpoint_every = num!(),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.corpus = corpus.ok_or(ConfigError::Missing("corpus"))?;
        cfg.classes = classes.ok_or(ConfigError::Missing("K"))?;
        Ok(cfg)
    }
}
