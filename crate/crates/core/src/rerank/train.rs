use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::head::{head_forward, HEAD_TENSORS};
use super::{FfnHead, RerankError};
use crate::autodiff::{AdamConfig, AdamState, ParamUpdate, Tape, Tensor, Var};
use crate::seed;
use crate::towers::{truncate_matrix, ModelArtifact, TowerParams};
use crate::trainer::{embed_indices, Featurized, HardSet, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// In-batch pairs per stage-1 step; the head scores all `B²` combinations.
    pub batch: usize,
    /// Hard sets per stage-2 step.
    pub stage2_batch: usize,
    pub lr: f64,
    pub stage2_lr: f64,
    /// Scores are divided by this before the in-batch softmax.
    pub temperature: f64,
    /// Scores are divided by this before the logistic hard-example loss.
    pub stage2_temperature: f64,
    pub use_weights: bool,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 300,
            stage2_steps: 400,
            batch: 64,
            stage2_batch: 32,
            lr: 1e-4,
            stage2_lr: 2e-4,
            temperature: 1.0,
            stage2_temperature: 5.0,
            use_weights: true,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainLog {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
}

/// Frozen encoder outputs at the head's cut, keyed by record index.
pub struct FrozenEmbeddings {
    rows: BTreeMap<usize, usize>,
    values: Tensor<f32>,
}

impl FrozenEmbeddings {
    pub fn build(
        tower: &TowerParams,
        cuts: &[usize],
        m: usize,
        features: &Featurized,
        idx: &[usize],
    ) -> Result<Self, RerankError> {
        let mut uniq = idx.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let e = embed_indices(tower, features, &uniq)?;
        let cuts = if m == tower.out_dim() { vec![m] } else { cuts.to_vec() };
        let values = truncate_matrix(&e, m, &cuts)?;
        Ok(Self {
            rows: uniq.into_iter().enumerate().map(|(i, r)| (r, i)).collect(),
            values,
        })
    }

    pub fn get(&self, record: usize) -> &[f32] {
        self.values.row(self.rows[&record])
    }
}

fn encoder_checksum(model: &ModelArtifact) -> (u64, u64) {
    (model.query.checksum(false), model.doc.checksum(false))
}

/// `n × 2m` matrix of concatenated `(q, d)` rows.
fn concat_rows(
    qe: &FrozenEmbeddings,
    de: &FrozenEmbeddings,
    pairs: &[(usize, usize)],
    m: usize,
) -> Result<Tensor<f32>, RerankError> {
    let mut z = Vec::with_capacity(pairs.len() * 2 * m);
    for &(q, d) in pairs {
        z.extend_from_slice(qe.get(q));
        z.extend_from_slice(de.get(d));
    }
    Ok(Tensor::matrix(pairs.len(), 2 * m, z)?)
}

fn apply(
    head: &mut FfnHead,
    adam: &mut AdamState<f32>,
    tape: &Tape<f32>,
    vars: &[Var; 8],
    loss: Var,
) -> Result<f64, RerankError> {
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(RerankError::NonFinite(value));
    }
    let g = tape.backward(loss)?;
    let grads: Vec<Vec<f32>> = vars.iter().map(|&v| g.wrt_or_zero(v)).collect();
    let mut updates: Vec<ParamUpdate<'_, f32>> = head
        .tensors
        .iter_mut()
        .zip(HEAD_TENSORS)
        .zip(&grads)
        .map(|((value, name), grad)| ParamUpdate { name, value, grad })
        .collect();
    adam.step(&mut updates)?;
    Ok(value)
}

/// Logistic loss on explicit positive and negative `(query, doc)` pairs.
fn hard_loss(
    tape: &mut Tape<f32>,
    vars: &[Var; 8],
    head: &FfnHead,
    z_pos: Tensor<f32>,
    z_neg: Tensor<f32>,
    tau: f64,
    dropout_seed: u64,
) -> Result<Var, RerankError> {
    let mut terms = Vec::new();
    for (z, sign) in [(z_pos, 1.0f32), (z_neg, -1.0)] {
        if z.rows() == 0 {
            continue;
        }
        let z = tape.constant(z);
        let s = head_forward(
            tape,
            vars,
            z,
            &head.config,
            seed::derive(dropout_seed, &[sign.to_bits() as u64]),
        )?;
        let s = tape.scale(s, sign / tau as f32);
        let ls = tape.log_sigmoid(s);
        let m = tape.mean(ls)?;
        terms.push(tape.neg(m));
    }
    let mut loss = *terms
        .first()
        .ok_or_else(|| RerankError::Config("hard batch without pairs".into()))?;
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

fn hard_pairs<'a>(sets: impl Iterator<Item = &'a HardSet>) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in sets {
        pos.extend(s.positives.iter().map(|&d| (s.query, d)));
        neg.extend(s.negatives.iter().map(|&d| (s.query, d)));
    }
    (pos, neg)
}

/// Two-stage head training against a frozen encoder: in-batch softmax over
/// all `B²` head scores, then logistic loss on the mined hard sets.
pub fn train_head(
    head: &FfnHead,
    model: &ModelArtifact,
    data: &TrainData,
    cfg: &HeadTrainConfig,
) -> Result<(FfnHead, HeadTrainLog), RerankError> {
    head.config.validate()?;
    if head.encoder_tte_id != model.tte_id {
        return Err(RerankError::Version {
            expected: head.encoder_tte_id.clone(),
            found: model.tte_id.clone(),
        });
    }
    if !(cfg.temperature > 0.0) || !(cfg.stage2_temperature > 0.0) || cfg.batch < 2 || cfg.stage2_batch == 0 {
        return Err(RerankError::Config(format!("invalid head training config {cfg:?}")));
    }
    let m = head.config.cut;
    if m > model.d_full() {
        return Err(RerankError::Dimension(format!(
            "cut {m} exceeds encoder width {}",
            model.d_full()
        )));
    }
    let mut log = HeadTrainLog::default();
    let mut out = head.clone();
    if cfg.stage1_steps == 0 && cfg.stage2_steps == 0 {
        return Ok((out, log));
    }
    let before = encoder_checksum(model);

    let (hp, hn) = hard_pairs(data.hard.iter());
    let qi: Vec<usize> = data
        .pairs
        .iter()
        .map(|p| p.query)
        .chain(data.hard.iter().map(|s| s.query))
        .collect();
    let di: Vec<usize> = data
        .pairs
        .iter()
        .map(|p| p.doc)
        .chain(hp.iter().chain(&hn).map(|p| p.1))
        .collect();
    let qe = FrozenEmbeddings::build(&model.query, &model.mrl_cuts, m, &data.features, &qi)?;
    let de = FrozenEmbeddings::build(&model.doc, &model.mrl_cuts, m, &data.features, &di)?;
    let tau = cfg.temperature;

    if cfg.stage1_steps > 0 {
        let b = cfg.batch;
        let per_epoch = data.pairs.len() / b;
        if per_epoch == 0 {
            return Err(RerankError::Config(format!(
                "{} pairs cannot fill a batch of {b}",
                data.pairs.len()
            )));
        }
        let mut adam = AdamState::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = Vec::new();
        for step in 0..cfg.stage1_steps {
            let (epoch, slot) = (step / per_epoch, step % per_epoch);
            if slot == 0 {
                order = (0..data.pairs.len()).collect();
                order.shuffle(&mut seed::rng(cfg.seed, &[0x6831, epoch as u64]));
            }
            let batch: Vec<_> = order[slot * b..(slot + 1) * b]
                .iter()
                .map(|&i| &data.pairs[i])
                .collect();
            let all: Vec<(usize, usize)> = batch
                .iter()
                .flat_map(|p| batch.iter().map(move |d| (p.query, d.doc)))
                .collect();
            let mut tape = Tape::<f32>::new();
            let vars = out.bind(&mut tape, true);
            let z = tape.constant(concat_rows(&qe, &de, &all, m)?);
            let s = head_forward(
                &mut tape,
                &vars,
                z,
                &out.config,
                seed::derive(cfg.seed, &[1, step as u64]),
            )?;
            let s = tape.reshape(s, vec![b, b])?;
            let s = tape.scale(s, 1.0 / tau as f32);
            let labels: Vec<usize> = (0..b).collect();
            let w: Option<Vec<f32>> = cfg.use_weights.then(|| batch.iter().map(|p| p.weight as f32).collect());
            let loss = tape.softmax_cross_entropy_rows(s, &labels, w.as_deref())?;
            log.stage1.push(apply(&mut out, &mut adam, &tape, &vars, loss)?);
        }
    }

    if cfg.stage2_steps > 0 {
        let b = cfg.stage2_batch;
        let usable: Vec<usize> = (0..data.hard.len())
            .filter(|&i| !data.hard[i].positives.is_empty() || !data.hard[i].negatives.is_empty())
            .collect();
        let per_epoch = usable.len() / b;
        if per_epoch == 0 {
            return Err(RerankError::Config(format!(
                "{} hard sets cannot fill a batch of {b}",
                usable.len()
            )));
        }
        let mut adam = AdamState::new(AdamConfig {
            lr: cfg.stage2_lr,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = Vec::new();
        for step in 0..cfg.stage2_steps {
            let (epoch, slot) = (step / per_epoch, step % per_epoch);
            if slot == 0 {
                order = usable.clone();
                order.shuffle(&mut seed::rng(cfg.seed, &[0x6832, epoch as u64]));
            }
            let (pos, neg) = hard_pairs(order[slot * b..(slot + 1) * b].iter().map(|&i| &data.hard[i]));
            let mut tape = Tape::<f32>::new();
            let vars = out.bind(&mut tape, true);
            let zp = concat_rows(&qe, &de, &pos, m)?;
            let zn = concat_rows(&qe, &de, &neg, m)?;
            let loss = hard_loss(
                &mut tape,
                &vars,
                &out,
                zp,
                zn,
                cfg.stage2_temperature,
                seed::derive(cfg.seed, &[2, step as u64]),
            )?;
            log.stage2.push(apply(&mut out, &mut adam, &tape, &vars, loss)?);
        }
    }

    let after = encoder_checksum(model);
    if before != after {
        return Err(RerankError::EncoderDrift { before, after });
    }
    Ok((out, log))
}

/// Fraction of (positive, negative) pairs within each set that `score`
/// orders correctly; ties count half.
pub fn pairwise_accuracy<F>(sets: &[HardSet], mut score: F) -> Result<f64, RerankError>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f32>, RerankError>,
{
    let (mut right, mut total) = (0.0, 0usize);
    for s in sets {
        if s.positives.is_empty() || s.negatives.is_empty() {
            continue;
        }
        let docs: Vec<usize> = s.positives.iter().chain(&s.negatives).copied().collect();
        let sc = score(s.query, &docs)?;
        let (p, n) = sc.split_at(s.positives.len());
        for a in p {
            for b in n {
                right += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(RerankError::Config("no complete hard sets to score".into()));
    }
    Ok(right / total as f64)
}

/// [`pairwise_accuracy`] of `head` over frozen encoder embeddings.
pub fn head_pairwise_accuracy(
    head: &FfnHead,
    model: &ModelArtifact,
    features: &Featurized,
    sets: &[HardSet],
) -> Result<f64, RerankError> {
    let m = head.config.cut;
    let (qe, de) = set_embeddings(model, m, features, sets)?;
    pairwise_accuracy(sets, |q, docs| {
        let refs: Vec<&[f32]> = docs.iter().map(|&d| de.get(d)).collect();
        head.score_many(qe.get(q), &refs)
    })
}

/// [`pairwise_accuracy`] of the plain dot product at cut `m`.
pub fn dot_pairwise_accuracy(
    model: &ModelArtifact,
    m: usize,
    features: &Featurized,
    sets: &[HardSet],
) -> Result<f64, RerankError> {
    let (qe, de) = set_embeddings(model, m, features, sets)?;
    pairwise_accuracy(sets, |q, docs| {
        let qv = qe.get(q);
        Ok(docs
            .iter()
            .map(|&d| qv.iter().zip(de.get(d)).map(|(a, b)| a * b).sum())
            .collect())
    })
}

fn set_embeddings(
    model: &ModelArtifact,
    m: usize,
    features: &Featurized,
    sets: &[HardSet],
) -> Result<(FrozenEmbeddings, FrozenEmbeddings), RerankError> {
    let qi: Vec<usize> = sets.iter().map(|s| s.query).collect();
    let di: Vec<usize> = sets
        .iter()
        .flat_map(|s| s.positives.iter().chain(&s.negatives).copied())
        .collect();
    Ok((
        FrozenEmbeddings::build(&model.query, &model.mrl_cuts, m, features, &qi)?,
        FrozenEmbeddings::build(&model.doc, &model.mrl_cuts, m, features, &di)?,
    ))
}
