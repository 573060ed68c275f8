use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureHasher, Layer, TowerConfig, TowerError, TowerParams};
use crate::autodiff::Tensor;
use crate::container::{bytes_to_f32s, content_id, f32s_to_bytes, Container};

pub const MODEL_KIND: [u8; 4] = *b"MODL";
pub const MODEL_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TowerMeta {
    config: TowerConfig,
    frozen: Vec<bool>,
    head: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    query_model_id: String,
    doc_model_id: String,
    tte_id: String,
    hasher: FeatureHasher,
    mrl_cuts: Vec<usize>,
    parent_tte_id: Option<String>,
    query: TowerMeta,
    doc: TowerMeta,
}

/// A query/document tower pair with content-derived version ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub query_model_id: String,
    pub doc_model_id: String,
    pub tte_id: String,
    pub hasher: FeatureHasher,
    pub query: TowerParams,
    pub doc: TowerParams,
    pub mrl_cuts: Vec<usize>,
    /// Artifact this one was fine-tuned from.
    pub parent_tte_id: Option<String>,
}

fn tower_bytes(hasher: &FeatureHasher, t: &TowerParams) -> Vec<u8> {
    let mut b = serde_json::to_vec(&(hasher, &t.config)).expect("plain data");
    for (name, tensor) in t.named_tensors() {
        b.extend_from_slice(name.as_bytes());
        b.extend(f32s_to_bytes(tensor.data()));
    }
    b
}

fn meta(t: &TowerParams) -> TowerMeta {
    TowerMeta {
        config: t.config,
        frozen: t.layers.iter().map(|l| l.frozen).collect(),
        head: t.head.as_ref().map(|h| (h.weight.rows(), h.weight.cols())),
    }
}

impl ModelArtifact {
    pub fn new(
        hasher: FeatureHasher,
        query: TowerParams,
        doc: TowerParams,
        mrl_cuts: Vec<usize>,
        parent_tte_id: Option<String>,
    ) -> Result<Self, TowerError> {
        if query.out_dim() != doc.out_dim() {
            return Err(TowerError::Config(format!(
                "query tower emits {} dims, document tower {}",
                query.out_dim(),
                doc.out_dim()
            )));
        }
        if mrl_cuts.is_empty()
            || mrl_cuts.windows(2).any(|w| w[0] >= w[1])
            || *mrl_cuts.last().unwrap() > query.out_dim()
        {
            return Err(TowerError::Config(format!(
                "cuts {mrl_cuts:?} invalid for width {}",
                query.out_dim()
            )));
        }
        let query_model_id = content_id("qm", &tower_bytes(&hasher, &query));
        let doc_model_id = content_id("dm", &tower_bytes(&hasher, &doc));
        let tte_id = content_id(
            "tte",
            format!("{query_model_id}/{doc_model_id}/{mrl_cuts:?}").as_bytes(),
        );
        Ok(Self {
            query_model_id,
            doc_model_id,
            tte_id,
            hasher,
            query,
            doc,
            mrl_cuts,
            parent_tte_id,
        })
    }

    /// Same towers with identifiers recomputed, e.g. after training.
    pub fn rebuild(&self, query: TowerParams, doc: TowerParams) -> Result<Self, TowerError> {
        Self::new(
            self.hasher,
            query,
            doc,
            self.mrl_cuts.clone(),
            Some(self.tte_id.clone()),
        )
    }

    pub fn d_full(&self) -> usize {
        self.query.out_dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            query_model_id: self.query_model_id.clone(),
            doc_model_id: self.doc_model_id.clone(),
            tte_id: self.tte_id.clone(),
            hasher: self.hasher,
            mrl_cuts: self.mrl_cuts.clone(),
            parent_tte_id: self.parent_tte_id.clone(),
            query: meta(&self.query),
            doc: meta(&self.doc),
        };
        let mut c = Container::new(MODEL_KIND, MODEL_SCHEMA);
        c.push("header", serde_json::to_vec(&header).expect("plain data"));
        for (prefix, t) in [("query", &self.query), ("doc", &self.doc)] {
            for (name, tensor) in t.named_tensors() {
                c.push(format!("{prefix}.{name}"), f32s_to_bytes(tensor.data()));
            }
        }
        c.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TowerError> {
        let c = Container::decode(bytes, MODEL_KIND, MODEL_SCHEMA)?;
        let header: Header =
            serde_json::from_slice(c.blob("header")?).map_err(|e| TowerError::Format(format!("model header: {e}")))?;
        let load = |prefix: &str, m: &TowerMeta| -> Result<TowerParams, TowerError> {
            let cfg = m.config;
            let mut shapes = vec![(cfg.num_buckets as usize, cfg.hidden)];
            shapes.extend(std::iter::repeat_n((cfg.hidden, cfg.hidden), cfg.hidden_layers));
            shapes.push((cfg.hidden, cfg.d_full));
            if m.frozen.len() != shapes.len() {
                return Err(TowerError::Format(format!(
                    "{prefix}: {} frozen flags for {} layers",
                    m.frozen.len(),
                    shapes.len()
                )));
            }
            let read = |name: String, r: usize, c2: usize| -> Result<(Tensor<f32>, Tensor<f32>), TowerError> {
                let w = bytes_to_f32s(&name, c.blob(&format!("{name}.weight"))?)?;
                let b = bytes_to_f32s(&name, c.blob(&format!("{name}.bias"))?)?;
                if w.len() != r * c2 || b.len() != c2 {
                    return Err(TowerError::Format(format!(
                        "{name}: payload does not match shape {r}x{c2}"
                    )));
                }
                Ok((Tensor::matrix(r, c2, w)?, Tensor::vector(b)))
            };
            let mut layers = Vec::new();
            for (i, &(r, c2)) in shapes.iter().enumerate() {
                let (weight, bias) = read(format!("{prefix}.layer{i}"), r, c2)?;
                layers.push(Layer {
                    weight,
                    bias,
                    frozen: m.frozen[i],
                });
            }
            let head = match m.head {
                Some((r, c2)) => {
                    let (weight, bias) = read(format!("{prefix}.head"), r, c2)?;
                    Some(Layer {
                        weight,
                        bias,
                        frozen: false,
                    })
                }
                None => None,
            };
            Ok(TowerParams {
                config: cfg,
                layers,
                head,
            })
        };
        let query = load("query", &header.query)?;
        let doc = load("doc", &header.doc)?;
        let art = Self::new(header.hasher, query, doc, header.mrl_cuts, header.parent_tte_id)?;
        if art.tte_id != header.tte_id
            || art.query_model_id != header.query_model_id
            || art.doc_model_id != header.doc_model_id
        {
            return Err(TowerError::Format(format!(
                "stored ids {} do not match content ({})",
                header.tte_id, art.tte_id
            )));
        }
        Ok(art)
    }

    pub fn save(&self, path: &Path) -> Result<(), TowerError> {
        crate::fsutil::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TowerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::ContainerError;
    use crate::towers::freeze_boundary;

    fn artifact() -> ModelArtifact {
        let cfg = TowerConfig {
            num_buckets: 64,
            hidden: 8,
            hidden_layers: 2,
            d_full: 8,
        };
        let hasher = FeatureHasher {
            num_buckets: 64,
            ..FeatureHasher::default()
        };
        let q = TowerParams::init(cfg, 1).unwrap();
        let d = freeze_boundary(&TowerParams::init(cfg, 2).unwrap(), 3).unwrap();
        ModelArtifact::new(hasher, q, d, vec![2, 4, 8], None).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let a = artifact();
        let b = ModelArtifact::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn ids_follow_content() {
        let a = artifact();
        assert_eq!(a.tte_id, artifact().tte_id);
        let mut q = a.query.clone();
        q.layers[1].bias.data_mut()[0] += 1.0;
        let b = a.rebuild(q, a.doc.clone()).unwrap();
        assert_ne!(a.query_model_id, b.query_model_id);
        assert_eq!(a.doc_model_id, b.doc_model_id);
        assert_ne!(a.tte_id, b.tte_id);
        assert_eq!(b.parent_tte_id.as_deref(), Some(a.tte_id.as_str()));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut bytes = artifact().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            ModelArtifact::from_bytes(&bytes),
            Err(TowerError::Container(ContainerError::Version { found: 2, expected: 1 }))
        ));
    }
}
