//! Offline k-NN evaluation: per-query candidate sets, recall@k by market and
//! vertical, and index size/latency accounting.

mod efficiency;
mod protocol;
mod report;

pub use efficiency::{efficiency_report, measure_latency, EfficiencyRow, LatencyStats};
pub use protocol::{
    build_candidate_set, evaluate_with, query_embeddings, recall_at_k, run_protocol, CandidateIndex, EvalQuery,
    EvalSet, ProtocolConfig,
};
pub use report::{CellRecall, EvalReport, QueryRecall, ReportMeta};

use crate::ann::AnnError;
use crate::towers::TowerError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("version mismatch: query model {model} but index built for {index}")]
    Version { model: String, index: String },
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Tower(#[from] TowerError),
}
