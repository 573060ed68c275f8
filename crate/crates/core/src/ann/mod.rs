//! Exact and approximate nearest-neighbor search over embedding prefixes.

mod file;
mod hnsw;
mod registry;
mod store;

pub use file::{IndexArtifact, IndexHeader, Metric, EXACT_SCAN_LIMIT, INDEX_KIND, INDEX_SCHEMA};
pub use hnsw::{HnswIndex, HnswParams};
pub use registry::{probe_recall, Guardrail, IndexRegistry};
pub use store::{
    exact_knn, int8_scales, quantize_int8, quantize_value, rank_order, CandidateSet, Payload, Precision, VectorStore,
};

use crate::container::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum AnnError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("guardrail failed: probe recall {recall:.4} below {min:.4}")]
    Guardrail { recall: f64, min: f64 },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
