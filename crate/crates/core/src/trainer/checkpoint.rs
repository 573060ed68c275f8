use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunEvent, TrainConfig, TrainError};
use crate::autodiff::{AdamConfig, AdamState, Moments, Tensor};
use crate::container::{bytes_to_f32s, f32s_to_bytes, Container};
use crate::towers::ModelArtifact;

pub const CHECKPOINT_KIND: [u8; 4] = *b"CKPT";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    step: usize,
    init_tte_id: String,
    adam: AdamConfig,
    adam_step: u64,
    moment_names: Vec<String>,
    frozen_query: Vec<bool>,
    frozen_doc: Vec<bool>,
    siglip: bool,
    events: Vec<RunEvent>,
}

/// Complete optimizer state at a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub init_tte_id: String,
    /// Current towers; frozen flags included.
    pub model: ModelArtifact,
    pub adam: AdamState<f32>,
    pub siglip: Option<(Tensor<f32>, Tensor<f32>)>,
    pub events: Vec<RunEvent>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let moments = self.adam.moments();
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            init_tte_id: self.init_tte_id.clone(),
            adam: self.adam.config,
            adam_step: self.adam.step_count(),
            moment_names: moments.keys().cloned().collect(),
            frozen_query: self.model.query.layers.iter().map(|l| l.frozen).collect(),
            frozen_doc: self.model.doc.layers.iter().map(|l| l.frozen).collect(),
            siglip: self.siglip.is_some(),
            events: self.events.clone(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, CHECKPOINT_SCHEMA);
        c.push("meta", serde_json::to_vec(&meta).expect("plain data"));
        c.push("model", self.model.to_bytes());
        for (name, m) in moments {
            c.push(format!("m1.{name}"), f32s_to_bytes(&m.first));
            c.push(format!("m2.{name}"), f32s_to_bytes(&m.second));
        }
        if let Some((t, b)) = &self.siglip {
            c.push("siglip.log_temperature", f32s_to_bytes(t.data()));
            c.push("siglip.bias", f32s_to_bytes(b.data()));
        }
        c.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let c = Container::decode(bytes, CHECKPOINT_KIND, CHECKPOINT_SCHEMA)?;
        let meta: Meta =
            serde_json::from_slice(c.blob("meta")?).map_err(|e| TrainError::Format(format!("checkpoint meta: {e}")))?;
        let mut model = ModelArtifact::from_bytes(c.blob("model")?)?;
        for (tower, flags) in [
            (&mut model.query, &meta.frozen_query),
            (&mut model.doc, &meta.frozen_doc),
        ] {
            if flags.len() != tower.layers.len() {
                return Err(TrainError::Format("frozen flags do not match layer count".into()));
            }
            for (l, &f) in tower.layers.iter_mut().zip(flags) {
                l.frozen = f;
            }
        }
        let mut moments = BTreeMap::new();
        for name in &meta.moment_names {
            let first = bytes_to_f32s(name, c.blob(&format!("m1.{name}"))?)?;
            let second = bytes_to_f32s(name, c.blob(&format!("m2.{name}"))?)?;
            if first.len() != second.len() {
                return Err(TrainError::Format(format!("moment lengths differ for `{name}`")));
            }
            moments.insert(name.clone(), Moments { first, second });
        }
        let siglip = if meta.siglip {
            let t = bytes_to_f32s("siglip", c.blob("siglip.log_temperature")?)?;
            let b = bytes_to_f32s("siglip", c.blob("siglip.bias")?)?;
            Some((Tensor::vector(t), Tensor::vector(b)))
        } else {
            None
        };
        Ok(Self {
            config: meta.config,
            step: meta.step,
            init_tte_id: meta.init_tte_id,
            model,
            adam: AdamState::from_parts(meta.adam, meta.adam_step, moments),
            siglip,
            events: meta.events,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        crate::fsutil::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
