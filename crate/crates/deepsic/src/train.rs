//! Training driver: corpus in, checkpoint and loss history out.

use deepsic_core::networks::{Model, ModelError};
use deepsic_core::rng::seeded;
use deepsic_core::training::{LossBreakdown, TrainError, Trainer};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::corpus::{Augment, CorpusError, LabeledCorpus, Split};
use crate::report::{write_loss_csv, ReportError};

/// Train/val/test fractions used by every command that splits a corpus.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("corpus has {found} classes, config says K = {expected}")]
    ClassCount { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Report(#[from] ReportError),
    /// The last good parameters and history were saved before returning.
    #[error("training stopped at step {step}: {source}")]
    Train {
        step: u64,
        #[source]
        source: TrainError,
    },
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<LossBreakdown>,
    pub warnings: Vec<String>,
}

pub fn open_split_corpus(cfg: &RunConfig) -> Result<LabeledCorpus, RunError> {
    let corpus = LabeledCorpus::open(&cfg.corpus)?.split(SPLIT_FRACTIONS, cfg.split_seed)?;
    if corpus.classes() != cfg.classes {
        return Err(RunError::ClassCount {
            expected: cfg.classes,
            found: corpus.classes(),
        });
    }
    Ok(corpus)
}

/// Runs `cfg.train.steps` optimizer steps on random train-split patches.
/// `progress` sees every step.
pub fn train_run<P>(cfg: &RunConfig, mut progress: P) -> Result<TrainOutcome, RunError>
where
    P: FnMut(u64, &LossBreakdown),
{
    let corpus = open_split_corpus(cfg)?;
    let bank = corpus.load(Split::Train)?;
    let model = Model::new(cfg.rate_config(), cfg.classes, &mut seeded(cfg.train.seed))?;
    let mut trainer = Trainer::new(model, cfg.train);
    let augment = if cfg.augment { Augment::Flip } else { Augment::None };
    while trainer.step_count() < cfg.train.steps {
        let step = trainer.step_count();
        let (x, labels) = bank.sample_patches(cfg.patch, cfg.train.batch, trainer.rng(), augment)?;
        match trainer.step(&x, &labels) {
            Ok(parts) => progress(step, &parts),
            Err(source) => {
                checkpoint::save(&cfg.out, &trainer.model)?;
                write_loss_csv(&cfg.loss_csv, trainer.history())?;
                return Err(RunError::Train { step, source });
            }
        }
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.steps {
            checkpoint::save(&cfg.out, &trainer.model)?;
            write_loss_csv(&cfg.loss_csv, trainer.history())?;
        }
    }
    checkpoint::save(&cfg.out, &trainer.model)?;
    write_loss_csv(&cfg.loss_csv, trainer.history())?;
    Ok(TrainOutcome {
        history: trainer.history().to_vec(),
        model: trainer.model,
        warnings: corpus.warnings,
    })
}
