use crate::autodiff::{Real, Tape, Tensor, Var};

use super::{check_temperature, check_unit_rows, similarity, ObjectiveError};

/// `N` index-aligned (query, positive) pairs. Off-diagonal pairs act as negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    pub queries: Var,
    pub docs: Var,
    /// Per-row weights `w_i >= 0`, normalized by their sum.
    pub weights: Option<Vec<T>>,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn new(queries: Var, docs: Var) -> Self {
        Self {
            queries,
            docs,
            weights: None,
        }
    }

    pub fn with_weights(mut self, w: Vec<T>) -> Self {
        self.weights = Some(w);
        self
    }

    fn validate(&self, tape: &Tape<T>) -> Result<usize, ObjectiveError> {
        let (sq, sd) = (tape.value(self.queries).shape(), tape.value(self.docs).shape());
        if sq != sd || sq.len() != 2 {
            return Err(ObjectiveError::Contract(format!(
                "queries {sq:?} and positives {sd:?} must be aligned matrices"
            )));
        }
        if sq[0] == 0 {
            return Err(ObjectiveError::Contract("empty batch".into()));
        }
        check_unit_rows(tape, self.queries, "query")?;
        check_unit_rows(tape, self.docs, "document")?;
        Ok(sq[0])
    }
}

/// `-(1/N) Σ_i log softmax_j(s_ij / τ)[i]`, or the `w_i`-weighted mean when
/// weights are present.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, batch: &ContrastiveBatch<T>, tau: f64) -> Result<Var, ObjectiveError> {
    check_temperature(tau)?;
    let n = batch.validate(tape)?;
    let s = similarity(tape, batch.queries, batch.docs)?;
    let logits = tape.scale(s, T::from_f64(1.0 / tau));
    let labels: Vec<usize> = (0..n).collect();
    Ok(tape.softmax_cross_entropy_rows(logits, &labels, batch.weights.as_deref())?)
}

/// Learnable SigLIP scalars on a tape: `log τ′` and `b`.
#[derive(Debug, Clone, Copy)]
pub struct SiglipParams {
    pub log_temperature: Var,
    pub bias: Var,
}

impl SiglipParams {
    pub fn on_tape<T: Real>(tape: &mut Tape<T>, temperature: f64, bias: f64) -> Result<Self, ObjectiveError> {
        check_temperature(temperature)?;
        Ok(Self {
            log_temperature: tape.param(Tensor::vector(vec![T::from_f64(temperature.ln())])),
            bias: tape.param(Tensor::vector(vec![T::from_f64(bias)])),
        })
    }
}

/// `-(1/N) Σ_i Σ_j log σ(l_ij (s_ij/τ′ + b))` with `l_ii = 1`, `l_ij = -1`.
///
/// τ′ is parameterized as `exp(log τ′)` so it stays strictly positive.
pub fn siglip_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &ContrastiveBatch<T>,
    params: SiglipParams,
) -> Result<Var, ObjectiveError> {
    let n = batch.validate(tape)?;
    if batch.weights.is_some() {
        return Err(ObjectiveError::Contract("siglip_loss does not take row weights".into()));
    }
    let s = similarity(tape, batch.queries, batch.docs)?;
    let neg_log_t = tape.neg(params.log_temperature);
    let inv_t = tape.exp(neg_log_t);
    let scaled = tape.mul_scalar(s, inv_t)?;
    let logits = tape.add_scalar(scaled, params.bias)?;
    let mut signs = vec![-T::ONE; n * n];
    for i in 0..n {
        signs[i * n + i] = T::ONE;
    }
    let signs = tape.constant(Tensor::matrix(n, n, signs)?);
    let z = tape.mul(logits, signs)?;
    let ls = tape.log_sigmoid(z);
    let total = tape.sum(ls);
    Ok(tape.scale(total, T::from_f64(-1.0 / n as f64)))
}
