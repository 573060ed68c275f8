//! Two-stage training: in-batch contrastive pretraining, then hard-example
//! fine-tuning, with run logs and resumable checkpoints.

mod checkpoint;
mod config;
mod data;
mod run;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_KIND, CHECKPOINT_SCHEMA};
pub use config::{InBatchLoss, Stage, TrainConfig};
pub use data::{click_pairs, hard_sets, Featurized, HardSet, Pair, Palette, TrainData};
pub use run::{RunEvent, RunRecord};
pub use train::{embed_indices, hard_negative_margin, palette_hit_rate, train_stage1, train_stage2, Trainer};

use std::path::PathBuf;

use crate::autodiff::NumericsError;
use crate::container::ContainerError;
use crate::corpus::CorpusError;
use crate::objectives::ObjectiveError;
use crate::towers::TowerError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training data error: {0}")]
    Data(String),
    #[error("non-finite loss or gradient at step {step}; last good checkpoint: {checkpoint:?}")]
    NonFinite { step: usize, checkpoint: Option<PathBuf> },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
