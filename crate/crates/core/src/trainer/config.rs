use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::objectives::MrlConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// In-batch contrastive training over logged (query, positive) pairs.
    InfoNce,
    /// Logistic training over mined hard positives and negatives.
    TripletNce,
}

/// Loss used by the in-batch stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InBatchLoss {
    InfoNce,
    Siglip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub in_batch_loss: InBatchLoss,
    /// Pairs per micro-batch in the in-batch stage, queries per micro-batch
    /// in the hard-example stage.
    pub micro_batch: usize,
    pub temperature: f64,
    /// Initial SigLIP temperature; learnable afterwards.
    pub siglip_temperature: f64,
    pub siglip_bias: f64,
    pub lr: f64,
    /// Training cuts. Empty means the full embedding only.
    pub mrl_cuts: Vec<usize>,
    pub mrl_weights: Option<Vec<f64>>,
    pub accumulation_steps: usize,
    /// Train only the last `n` layers of each tower.
    pub trainable_layers: Option<usize>,
    pub seed: u64,
    pub max_steps: usize,
    /// Steps between checkpoints; zero disables them.
    pub checkpoint_interval: usize,
    pub eval_interval: usize,
    pub eval_k: usize,
    /// Weight in-batch rows by their logged interaction rate.
    pub use_weights: bool,
    pub max_positives: usize,
    pub negatives_per_positive: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::InfoNce,
            in_batch_loss: InBatchLoss::InfoNce,
            micro_batch: 128,
            temperature: 0.07,
            siglip_temperature: 0.07,
            siglip_bias: -6.0,
            lr: 2e-3,
            mrl_cuts: vec![8, 16, 32, 64],
            mrl_weights: None,
            accumulation_steps: 1,
            trainable_layers: None,
            seed: 7,
            max_steps: 1000,
            checkpoint_interval: 0,
            eval_interval: 200,
            eval_k: 10,
            use_weights: true,
            max_positives: 4,
            negatives_per_positive: 4,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::TripletNce,
            micro_batch: 32,
            // The pointwise logistic terms saturate at small temperatures and
            // the negative side then dominates; a wide temperature keeps both
            // sides active on cosine scores.
            temperature: 2.0,
            lr: 2e-4,
            trainable_layers: Some(3),
            max_steps: 400,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.stage == Stage::InfoNce && self.micro_batch < 2 {
            return bad(format!(
                "in-batch negatives need a micro-batch of at least 2, got {}",
                self.micro_batch
            ));
        }
        if self.micro_batch == 0 {
            return bad("micro-batch must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.siglip_temperature > 0.0 && self.siglip_temperature.is_finite()) || !self.siglip_bias.is_finite() {
            return bad("SigLIP initialization must be finite with positive temperature".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.lr));
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation steps must be at least 1".into());
        }
        if self.eval_k == 0 {
            return bad("eval k must be positive".into());
        }
        if self.trainable_layers == Some(0) {
            return bad("at least one layer must be trainable".into());
        }
        if self.stage == Stage::TripletNce && (self.max_positives == 0 || self.negatives_per_positive == 0) {
            return bad("hard-example batches need positives and negatives".into());
        }
        if !self.mrl_cuts.is_empty() {
            self.mrl(usize::MAX)?;
        }
        Ok(())
    }

    /// MRL configuration for embeddings of width `d_full`.
    pub fn mrl(&self, d_full: usize) -> Result<MrlConfig, TrainError> {
        if self.mrl_cuts.is_empty() {
            return Ok(MrlConfig::single(d_full));
        }
        if let Some(&c) = self.mrl_cuts.iter().find(|&&c| c > d_full) {
            return Err(TrainError::Config(format!("cut {c} exceeds embedding width {d_full}")));
        }
        let cfg = match &self.mrl_weights {
            Some(w) => MrlConfig::with_weights(self.mrl_cuts.clone(), w.clone())?,
            None => MrlConfig::new(self.mrl_cuts.clone())?,
        };
        Ok(cfg)
    }

    /// Whether a checkpoint written under `other` may continue under `self`.
    /// Only the step budget and checkpoint cadence may differ.
    pub fn resumable_from(&self, other: &TrainConfig) -> bool {
        let norm = |c: &TrainConfig| TrainConfig {
            max_steps: 0,
            checkpoint_interval: 0,
            ..c.clone()
        };
        norm(self) == norm(other)
    }
}
