//! Unshared query and document encoders over hashed bag-of-token features.

mod artifact;
mod hasher;
mod tower;

pub use artifact::{ModelArtifact, MODEL_KIND, MODEL_SCHEMA};
pub use hasher::{FeatureHasher, InputFormat, Role};
pub use tower::{
    encode, fixed_projection_head, freeze_boundary, truncate_matrix, truncate_mrl, BoundTower, Layer, TowerConfig,
    TowerParams, ENCODE_CHUNK,
};

use crate::autodiff::NumericsError;
use crate::container::ContainerError;
use crate::corpus::CorpusError;

#[derive(Debug, thiserror::Error)]
pub enum TowerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("blob has no tokens to encode")]
    EmptyInput,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
