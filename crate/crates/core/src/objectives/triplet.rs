use crate::autodiff::{Real, Tape, Var};

use super::{check_temperature, check_unit_rows, ObjectiveError};

/// Queries and documents with explicit `(query row, doc row)` positive and
/// negative pairs, i.e. the flattened `P(q)` and `N(q)` sets of every query.
#[derive(Debug, Clone)]
pub struct HardExampleBatch {
    pub queries: Var,
    pub docs: Var,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl HardExampleBatch {
    fn validate<T: Real>(&self, tape: &Tape<T>) -> Result<(), ObjectiveError> {
        let (sq, sd) = (tape.value(self.queries).shape(), tape.value(self.docs).shape());
        if sq.len() != 2 || sd.len() != 2 || sq[1] != sd[1] {
            return Err(ObjectiveError::Contract(format!(
                "queries {sq:?} and documents {sd:?} must share a width"
            )));
        }
        if self.positives.is_empty() && self.negatives.is_empty() {
            return Err(ObjectiveError::Contract(
                "triplet loss needs at least one positive or negative pair".into(),
            ));
        }
        let mut has_pair = vec![false; sq[0]];
        for &(q, d) in self.positives.iter().chain(&self.negatives) {
            if q >= sq[0] || d >= sd[0] {
                return Err(ObjectiveError::Contract(format!("pair ({q}, {d}) out of range")));
            }
            has_pair[q] = true;
        }
        if let Some(q) = has_pair.iter().position(|&h| !h) {
            return Err(ObjectiveError::Contract(format!(
                "query row {q} has neither positives nor negatives"
            )));
        }
        check_unit_rows(tape, self.queries, "query")?;
        check_unit_rows(tape, self.docs, "document")?;
        Ok(())
    }
}

fn pair_logits<T: Real>(
    tape: &mut Tape<T>,
    batch: &HardExampleBatch,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Var, ObjectiveError> {
    let qi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let di: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let q = tape.gather_rows(batch.queries, &qi)?;
    let d = tape.gather_rows(batch.docs, &di)?;
    let prod = tape.mul(q, d)?;
    let s = tape.sum_rows(prod)?;
    Ok(tape.scale(s, T::from_f64(1.0 / tau)))
}

/// `E_P[log(1 + e^{-z})] + E_N[log(1 + e^{z})]` with `z = sim(q, d) / τ`.
///
/// Both terms use the stable `-log σ(±z)` form. An empty side contributes zero.
pub fn triplet_nce<T: Real>(tape: &mut Tape<T>, batch: &HardExampleBatch, tau: f64) -> Result<Var, ObjectiveError> {
    check_temperature(tau)?;
    batch.validate(tape)?;
    let mut terms = Vec::with_capacity(2);
    if !batch.positives.is_empty() {
        let z = pair_logits(tape, batch, &batch.positives, tau)?;
        let ls = tape.log_sigmoid(z);
        let m = tape.mean(ls)?;
        terms.push(tape.neg(m));
    }
    if !batch.negatives.is_empty() {
        let z = pair_logits(tape, batch, &batch.negatives, tau)?;
        let nz = tape.neg(z);
        let ls = tape.log_sigmoid(nz);
        let m = tape.mean(ls)?;
        terms.push(tape.neg(m));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}
