use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::autodiff::Tensor;
use crate::container::{bytes_to_f32s, content_id, f32s_to_bytes, fnv64, Container};
use crate::corpus::Corpus;
use crate::towers::{ModelArtifact, Role};

pub const EMBEDDINGS_KIND: [u8; 4] = *b"EMBD";
pub const EMBEDDINGS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    set_id: String,
    tte_id: String,
    parent_set_id: Option<String>,
    dim: usize,
    ids: Vec<String>,
    hashes: Vec<u64>,
}

/// Full-width document embeddings of one corpus under one model, with a
/// content hash of every record's model input for change detection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub set_id: String,
    pub tte_id: String,
    /// Set this one was derived from by a delta run.
    pub parent_set_id: Option<String>,
    pub ids: Vec<String>,
    pub hashes: Vec<u64>,
    pub vectors: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeltaStats {
    pub reused: usize,
    pub recomputed: usize,
    pub removed: usize,
}

fn set_id(tte_id: &str, ids: &[String], hashes: &[u64], vectors: &Tensor<f32>) -> String {
    let mut b = tte_id.as_bytes().to_vec();
    for (id, h) in ids.iter().zip(hashes) {
        b.extend_from_slice(id.as_bytes());
        b.push(0);
        b.extend_from_slice(&h.to_le_bytes());
    }
    b.extend(f32s_to_bytes(vectors.data()));
    content_id("emb", &b)
}

fn inputs(model: &ModelArtifact, corpus: &Corpus) -> Result<(Vec<String>, Vec<String>, Vec<u64>), PipelineError> {
    let mut ids = Vec::new();
    let mut blobs = Vec::new();
    for (r, _) in corpus.documents() {
        ids.push(r.id.clone());
        blobs.push(model.hasher.blob(r)?);
    }
    let hashes = blobs.iter().map(|b| fnv64(b.as_bytes())).collect();
    Ok((ids, blobs, hashes))
}

impl EmbeddingSet {
    fn assemble(
        model: &ModelArtifact,
        parent: Option<String>,
        ids: Vec<String>,
        hashes: Vec<u64>,
        vectors: Tensor<f32>,
    ) -> Self {
        Self {
            set_id: set_id(&model.tte_id, &ids, &hashes, &vectors),
            tte_id: model.tte_id.clone(),
            parent_set_id: parent,
            ids,
            hashes,
            vectors,
        }
    }

    pub fn build(model: &ModelArtifact, corpus: &Corpus) -> Result<Self, PipelineError> {
        let (ids, blobs, hashes) = inputs(model, corpus)?;
        let refs: Vec<&str> = blobs.iter().map(String::as_str).collect();
        let vectors = model.doc.encode_batch(&model.hasher, &refs, Role::Document)?;
        Ok(Self::assemble(model, None, ids, hashes, vectors))
    }

    /// Re-embeds only documents that are new or whose model input changed
    /// since `prev`; documents no longer in the corpus are dropped.
    pub fn delta(
        prev: &EmbeddingSet,
        model: &ModelArtifact,
        corpus: &Corpus,
    ) -> Result<(Self, DeltaStats), PipelineError> {
        if prev.tte_id != model.tte_id {
            return Err(PipelineError::Version(format!(
                "embeddings {} were made by {} but the model is {}; a delta cannot mix models, embed from scratch",
                prev.set_id, prev.tte_id, model.tte_id
            )));
        }
        let (ids, blobs, hashes) = inputs(model, corpus)?;
        let old: HashMap<(&str, u64), usize> = prev
            .ids
            .iter()
            .zip(&prev.hashes)
            .enumerate()
            .map(|(i, (id, &h))| ((id.as_str(), h), i))
            .collect();
        let stale: Vec<usize> = (0..ids.len())
            .filter(|&i| !old.contains_key(&(ids[i].as_str(), hashes[i])))
            .collect();
        let refs: Vec<&str> = stale.iter().map(|&i| blobs[i].as_str()).collect();
        let fresh = model.doc.encode_batch(&model.hasher, &refs, Role::Document)?;
        let d = model.d_full();
        let mut data = Vec::with_capacity(ids.len() * d);
        let mut next = 0;
        for i in 0..ids.len() {
            match old.get(&(ids[i].as_str(), hashes[i])) {
                Some(&j) => data.extend_from_slice(prev.vectors.row(j)),
                None => {
                    data.extend_from_slice(fresh.row(next));
                    next += 1;
                }
            }
        }
        let kept = ids.len() - stale.len();
        let stats = DeltaStats {
            reused: kept,
            recomputed: stale.len(),
            removed: prev.ids.len() - kept,
        };
        let vectors = Tensor::matrix(ids.len(), d, data)?;
        Ok((
            Self::assemble(model, Some(prev.set_id.clone()), ids, hashes, vectors),
            stats,
        ))
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// True if the set covers exactly the corpus documents with unchanged inputs.
    pub fn is_current(&self, model: &ModelArtifact, corpus: &Corpus) -> Result<bool, PipelineError> {
        let (ids, _, hashes) = inputs(model, corpus)?;
        Ok(ids == self.ids && hashes == self.hashes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            set_id: self.set_id.clone(),
            tte_id: self.tte_id.clone(),
            parent_set_id: self.parent_set_id.clone(),
            dim: self.dim(),
            ids: self.ids.clone(),
            hashes: self.hashes.clone(),
        };
        let mut c = Container::new(EMBEDDINGS_KIND, EMBEDDINGS_SCHEMA);
        c.push("header", serde_json::to_vec(&header).expect("plain data"));
        c.push("vectors", f32s_to_bytes(self.vectors.data()));
        c.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let c = Container::decode(bytes, EMBEDDINGS_KIND, EMBEDDINGS_SCHEMA)?;
        let h: Header = serde_json::from_slice(c.blob("header")?)?;
        let data = bytes_to_f32s("vectors", c.blob("vectors")?)?;
        if h.ids.len() != h.hashes.len() || data.len() != h.ids.len() * h.dim {
            return Err(PipelineError::Config(
                "embeddings file is internally inconsistent".into(),
            ));
        }
        let vectors = Tensor::matrix(h.ids.len(), h.dim, data)?;
        if set_id(&h.tte_id, &h.ids, &h.hashes, &vectors) != h.set_id {
            return Err(PipelineError::Config(format!(
                "embeddings content does not match set id {}",
                h.set_id
            )));
        }
        Ok(Self {
            set_id: h.set_id,
            tte_id: h.tte_id,
            parent_set_id: h.parent_set_id,
            ids: h.ids,
            hashes: h.hashes,
            vectors,
        })
    }
}
