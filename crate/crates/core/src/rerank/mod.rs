//! Learned FFN scoring head over concatenated query/document embeddings and
//! two-step retrieve-then-rerank.

mod eval;
mod head;
mod retrieve;
mod train;

pub use eval::evaluate_rerank;
pub use head::{ffn_score, head_forward, FfnHead, HeadConfig, HEAD_KIND, HEAD_SCHEMA, HEAD_TENSORS};
pub use retrieve::{retrieve_rerank, DotScorer, PairScorer, RerankConfig};
pub use train::{
    dot_pairwise_accuracy, head_pairwise_accuracy, pairwise_accuracy, train_head, FrozenEmbeddings, HeadTrainConfig,
    HeadTrainLog,
};

use crate::ann::AnnError;
use crate::autodiff::NumericsError;
use crate::container::ContainerError;
use crate::eval::EvalError;
use crate::towers::TowerError;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("version mismatch: expected encoder {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("encoder parameters changed during head training ({before:?} -> {after:?})")]
    EncoderDrift { before: (u64, u64), after: (u64, u64) },
    #[error("head loss became {0}")]
    NonFinite(f64),
    #[error("malformed head artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
