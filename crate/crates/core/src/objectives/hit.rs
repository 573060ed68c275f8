use crate::autodiff::{Real, Tensor};

use super::ObjectiveError;

/// Whether column `label` is among the top `k` entries of `row`, ties broken by
/// lowest column index.
pub fn topk_contains<T: Real>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

/// `H@k = (1/B) Σ_i 1{y_i ∈ TopK_k(Z_i)}` over a `B×M` logits matrix.
pub fn hit_at_k<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64, ObjectiveError> {
    if logits.shape().len() != 2 {
        return Err(ObjectiveError::Contract(format!(
            "logits must be B×M, got {:?}",
            logits.shape()
        )));
    }
    let (b, m) = (logits.rows(), logits.cols());
    if labels.len() != b || b == 0 {
        return Err(ObjectiveError::Contract(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if k == 0 || k > m {
        return Err(ObjectiveError::Contract(format!("k = {k} outside 1..={m}")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(ObjectiveError::Contract(format!("label {bad} outside {m} columns")));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| topk_contains(logits.row(i), y, k))
        .count();
    Ok(hits as f64 / b as f64)
}
