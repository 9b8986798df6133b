//! Command surface. Exit codes: 0 success, 1 usage, 2 data or format,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use deepsic_core::bitstream::{parse, serialize_with_layout, CompressedBlob};
use deepsic_core::codec::{compress, decompress, semantic_from_payload, CodecError};
use deepsic_core::metrics::{bpp, RDPoint};
use deepsic_core::networks::{Model, ModelError, RatePreset, SemanticResult, Variant};
use deepsic_core::nn::NnError;
use deepsic_core::training::TrainError;
use thiserror::Error;

use crate::atomic::{write_atomic, AtomicWriteError};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{CorpusError, Split};
use crate::eval::{evaluate_set, thread_pool, EvalImages, EvaluateError};
use crate::image_io::{load_image, save_image, ImageIoError};
use crate::report::{write_rd_csv, write_rd_plot, ReportError};
use crate::toy::write_toy_corpus;
use crate::train::{train_run, RunError};

#[derive(Parser, Debug)]
#[command(name = "deepsic", version, about = "Semantic image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Lo,
    Mid,
    Hi,
}

impl From<PresetArg> for RatePreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Lo => RatePreset::Lo,
            PresetArg::Mid => RatePreset::Mid,
            PresetArg::Hi => RatePreset::Hi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Pre,
    Post,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Pre => Variant::PreSemantic,
            VariantArg::Post => Variant::PostSemantic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode a PNG/PPM image into a stream.
    Compress {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Must match the checkpoint when given.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, value_enum, default_value = "post")]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a stream into a PNG/PPM image.
    Decompress {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print the class decision (stored, or computed from the decoded features).
        #[arg(long)]
        semantics: bool,
    },
    /// Print a stream's header and stored class record without running any network.
    Inspect { input: PathBuf },
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the training seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean bpp, PSNR, MS-SSIM and accuracy over a corpus.
    Evaluate {
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, value_enum, default_value = "post")]
        variant: VariantArg,
        #[arg(long)]
        report: PathBuf,
        /// Split seed for labeled corpora.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// One RD point per checkpoint, written as CSV plus an SVG chart.
    RdSweep {
        corpus: PathBuf,
        /// Repeat once per preset.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_enum, default_values = ["post"])]
        variant: Vec<VariantArg>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Generate the synthetic ten-class training corpus.
    MakeToyCorpus {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}: {source}")]
    Stream {
        path: PathBuf,
        #[source]
        source: deepsic_core::bitstream::BitstreamError,
    },
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Write(#[from] AtomicWriteError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Mismatch(String),
}

fn is_numerical_nn(e: &NnError) -> bool {
    matches!(e, NnError::NonFinite(_) | NnError::ProbabilityFloor { .. })
}

fn is_numerical_model(e: &ModelError) -> bool {
    matches!(e, ModelError::Nn(n) if is_numerical_nn(n))
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Evaluate(EvaluateError::Threads(_)) => 1,
            CliError::Run(RunError::Train { source, .. }) => match source {
                TrainError::NonFinite { .. } | TrainError::NonFiniteGradient(_) => 3,
                TrainError::Nn(n) if is_numerical_nn(n) => 3,
                TrainError::Model(m) if is_numerical_model(m) => 3,
                _ => 2,
            },
            CliError::Codec(CodecError::Model(m)) if is_numerical_model(m) => 3,
            _ => 2,
        }
    }
}

/// Result of a successful command.
#[derive(Debug, Default, PartialEq)]
pub struct CommandOutcome {
    /// Lines for standard output.
    pub summary: String,
    pub report: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn load_model(path: &Path, preset: Option<PresetArg>) -> Result<Model<f32>, CliError> {
    let model = checkpoint::load(path)?;
    if let Some(p) = preset {
        let want = RatePreset::from(p);
        if model.config().named_preset() != Some(want) {
            return Err(CliError::Mismatch(format!(
                "checkpoint {} is not a {} model",
                path.display(),
                want.name()
            )));
        }
    }
    Ok(model)
}

fn parse_stream(path: &Path) -> Result<(CompressedBlob, usize), CliError> {
    let bytes = read(path)?;
    let blob = parse(&bytes).map_err(|source| CliError::Stream {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((blob, bytes.len()))
}

/// Top-5 listing shared by `inspect` and `decompress --semantics`.
pub fn format_semantics(s: &SemanticResult) -> String {
    let mut out = format!("class {}\n", s.class_id);
    for (rank, (id, p)) in s.top.iter().enumerate() {
        let _ = writeln!(out, "  top{} class {id} p={p:.4}", rank + 1);
    }
    out
}

pub fn run(cli: Cli) -> Result<CommandOutcome, CliError> {
    match cli.command {
        Command::Compress {
            input,
            model,
            preset,
            variant,
            out,
        } => {
            let model = load_model(&model, preset)?;
            let image = load_image(&input)?;
            let blob = compress(&model, &image, variant.into())?;
            let (bytes, _) = serialize_with_layout(&blob).map_err(CodecError::from)?;
            write_atomic(&out, &bytes)?;
            let (w, h) = blob.output_size();
            let mut summary = format!(
                "{}: {} bytes, {:.4} bpp\n",
                out.display(),
                bytes.len(),
                bpp(bytes.len(), w as usize, h as usize)
            );
            if let Some(s) = &blob.semantic {
                let _ = writeln!(summary, "embedded class {}", s.class_id);
            }
            Ok(CommandOutcome { summary, report: None })
        }
        Command::Decompress {
            input,
            model,
            out,
            semantics,
        } => {
            let (blob, _) = parse_stream(&input)?;
            let model = load_model(&model, None)?;
            let decoded = decompress(&model, &blob)?;
            save_image(&out, &decoded.image)?;
            let (w, h) = blob.output_size();
            let mut summary = format!("{}: {w}×{h}\n", out.display());
            if semantics {
                summary.push_str(&format_semantics(&decoded.semantic));
            }
            Ok(CommandOutcome { summary, report: None })
        }
        Command::Inspect { input } => {
            let (blob, total) = parse_stream(&input)?;
            let (_, layout) = serialize_with_layout(&blob).map_err(CodecError::from)?;
            let (w, h) = blob.output_size();
            let [c, fh, fw] = blob.features.shape();
            let mut s = String::new();
            let _ = writeln!(s, "variant {}", blob.variant.name());
            let _ = writeln!(s, "coded size {}×{}", blob.width, blob.height);
            let _ = writeln!(s, "output size {w}×{h}");
            let _ = writeln!(
                s,
                "preset {} bits {} classes {}",
                blob.preset.name(),
                blob.bits,
                blob.classes
            );
            let _ = writeln!(s, "features {c}×{fh}×{fw}");
            let _ = writeln!(
                s,
                "bytes {total} (header {} semantic {} extension {} payload {})",
                layout.header, layout.semantic, layout.extension, layout.payload
            );
            let _ = writeln!(s, "bpp {:.4}", bpp(total, w as usize, h as usize));
            if let Some(sem) = &blob.semantic {
                let _ = writeln!(s, "semantic overhead {} bits", blob.semantic_overhead_bits());
                s.push_str(&format_semantics(&semantic_from_payload(sem, blob.classes as usize)));
            }
            Ok(CommandOutcome {
                summary: s,
                report: None,
            })
        }
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let every = (cfg.train.steps / 20).max(1);
            let start = std::time::Instant::now();
            let outcome = train_run(&cfg, |step, l| {
                if step % every == 0 {
                    eprintln!(
                        "step {step} R={:.1} D={:.5} Lsem={:.4} L={:.3}",
                        l.rate, l.distortion, l.semantic, l.total
                    );
                }
            })?;
            let mut summary = String::new();
            for w in &outcome.warnings {
                let _ = writeln!(summary, "warning: {w}");
            }
            if let Some(l) = outcome.history.last() {
                let _ = writeln!(
                    summary,
                    "trained {} steps in {:.0} s: R={:.1} D={:.5} Lsem={:.4} L={:.3}",
                    outcome.history.len(),
                    start.elapsed().as_secs_f64(),
                    l.rate,
                    l.distortion,
                    l.semantic,
                    l.total
                );
            }
            let _ = writeln!(summary, "checkpoint {}", cfg.out.display());
            Ok(CommandOutcome {
                summary,
                report: Some(cfg.loss_csv),
            })
        }
        Command::Evaluate {
            corpus,
            model,
            preset,
            variant,
            report,
            seed,
            split,
        } => {
            let pool = thread_pool()?;
            let model = load_model(&model, preset)?;
            let set = EvalImages::open(&corpus, split.into(), seed)?;
            let (point, _) = evaluate_set(&model, &set, variant.into(), &pool)?;
            write_rd_csv(&report, &[point])?;
            Ok(CommandOutcome {
                summary: describe_point(&point, set.len()),
                report: Some(report),
            })
        }
        Command::RdSweep {
            corpus,
            model,
            variant,
            report,
            seed,
            split,
        } => {
            let pool = thread_pool()?;
            let models = model
                .iter()
                .map(|p| load_model(p, None))
                .collect::<Result<Vec<_>, _>>()?;
            let mut presets: Vec<RatePreset> = models.iter().filter_map(|m| m.config().named_preset()).collect();
            presets.sort_by_key(|p| p.id());
            presets.dedup();
            if presets.len() < 2 || presets.len() != models.len() {
                return Err(CliError::Usage(
                    "rd-sweep needs one checkpoint per preset and at least two presets".into(),
                ));
            }
            let set = EvalImages::open(&corpus, split.into(), seed)?;
            let mut points = Vec::new();
            let mut summary = String::new();
            for v in &variant {
                for m in &models {
                    let (point, _) = evaluate_set(m, &set, (*v).into(), &pool)?;
                    summary.push_str(&describe_point(&point, set.len()));
                    points.push(point);
                }
            }
            points.sort_by(|a, b| {
                (a.variant.name(), a.bpp)
                    .partial_cmp(&(b.variant.name(), b.bpp))
                    .unwrap()
            });
            write_rd_csv(&report, &points)?;
            let plot = report.with_extension("svg");
            write_rd_plot(&plot, &points)?;
            let _ = writeln!(summary, "plot {}", plot.display());
            Ok(CommandOutcome {
                summary,
                report: Some(report),
            })
        }
        Command::MakeToyCorpus {
            out,
            seed,
            per_class,
            size,
        } => {
            if per_class == 0 || size < 16 {
                return Err(CliError::Usage("need --per-class ≥ 1 and --size ≥ 16".into()));
            }
            let corpus = write_toy_corpus(&out, per_class, size, seed)?;
            Ok(CommandOutcome {
                summary: format!(
                    "{}: {} classes, {} images\n",
                    out.display(),
                    corpus.classes(),
                    corpus.samples.len()
                ),
                report: None,
            })
        }
    }
}

fn describe_point(p: &RDPoint, images: usize) -> String {
    let mut s = format!(
        "{} {}: {images} images, {:.4} bpp, PSNR {:.2} dB, MS-SSIM {:.4}",
        p.preset.name(),
        p.variant.name(),
        p.bpp,
        p.psnr,
        p.ms_ssim
    );
    if let (Some(t1), Some(t5)) = (p.top1, p.top5) {
        let _ = write!(s, ", top-1 {:.3}, top-5 {:.3}", t1, t5);
    }
    s.push('\n');
    s
}
