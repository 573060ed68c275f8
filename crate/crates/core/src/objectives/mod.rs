//! Training objectives over cosine similarities of unit-norm embeddings.
//!
//! * [`info_nce`]: softmax over in-batch negatives.
//! * [`triplet_nce`]: logistic terms over explicit positive/negative sets.
//! * [`siglip_loss`]: pairwise sigmoid with learnable temperature and bias.
//! * [`mrl_wrap`]: sums a base loss over nested prefix cuts.
//! * [`hit_at_k`]: the batch hit-rate proxy metric.

mod contrastive;
mod hit;
mod mrl;
mod triplet;

pub use contrastive::{info_nce, siglip_loss, ContrastiveBatch, SiglipParams};
pub use hit::{hit_at_k, topk_contains};
pub use mrl::{mrl_wrap, truncate_rows, MrlConfig};
pub use triplet::{triplet_nce, HardExampleBatch};

use crate::autodiff::{NumericsError, Real, Tape, Var};

/// InfoNCE temperature; fixed, not learned.
pub const INFONCE_TEMPERATURE: f64 = 0.07;
/// Initial SigLIP bias.
pub const SIGLIP_INIT_BIAS: f64 = -6.0;

/// Allowed deviation of a row norm from one before the cosine assumption is
/// considered broken.
pub const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub(crate) fn check_temperature(tau: f64) -> Result<(), ObjectiveError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ObjectiveError::Contract(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

pub(crate) fn check_unit_rows<T: Real>(tape: &Tape<T>, v: Var, what: &str) -> Result<(), ObjectiveError> {
    let t = tape.value(v);
    if t.shape().len() != 2 {
        return Err(ObjectiveError::Contract(format!(
            "{what} must be a matrix, got {:?}",
            t.shape()
        )));
    }
    for r in 0..t.rows() {
        let n: f64 = t.row(r).iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ObjectiveError::Contract(format!(
                "{what} row {r} has norm {n:.6}; cosine scoring needs unit-norm embeddings"
            )));
        }
    }
    Ok(())
}

/// `[n×d] · [m×d]ᵀ` on the tape.
pub(crate) fn similarity<T: Real>(tape: &mut Tape<T>, q: Var, d: Var) -> Result<Var, NumericsError> {
    let dt = tape.transpose(d)?;
    tape.matmul(q, dt)
}
