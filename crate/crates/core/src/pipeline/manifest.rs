use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::ann::Precision;
use crate::container::content_id;

/// A workspace file and the content id it had when it was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub id: String,
}

impl FileRef {
    pub fn of(rel: &Path, bytes: &[u8]) -> Self {
        Self {
            path: rel.to_path_buf(),
            id: file_id(bytes),
        }
    }

    /// `None` if the file still has the recorded content, else what is wrong.
    pub fn check(&self, root: &Path) -> Option<String> {
        match std::fs::read(root.join(&self.path)) {
            Ok(b) if file_id(&b) == self.id => None,
            Ok(_) => Some(format!("{} changed since it was recorded", self.path.display())),
            Err(_) => Some(format!("{} is missing", self.path.display())),
        }
    }
}

pub(crate) fn file_id(bytes: &[u8]) -> String {
    content_id("file", bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub corpus: FileRef,
    pub interactions: FileRef,
    pub seed: u64,
    pub documents: usize,
    pub queries: usize,
    pub interaction_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    /// Corpus file the training data was built from.
    pub corpus_id: String,
    pub data_fingerprint: String,
    pub init_tte_id: String,
    pub stage1_tte_id: String,
    pub tte_id: String,
    pub query_model_id: String,
    pub doc_model_id: String,
    pub head_id: String,
    pub stage1: FileRef,
    pub model: FileRef,
    pub head: FileRef,
    pub logs: Vec<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedEntry {
    pub set_id: String,
    pub tte_id: String,
    pub corpus_id: String,
    pub parent_set_id: Option<String>,
    pub reused: usize,
    pub recomputed: usize,
    pub file: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub label: String,
    pub cut: usize,
    pub precision: Precision,
    pub tte_id: String,
    pub embeddings_set_id: String,
    pub probe_recall: f64,
    pub file: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub tte_id: String,
    pub head_id: String,
    pub embeddings_set_id: String,
    pub indices: Vec<String>,
    pub reports: Vec<FileRef>,
}

/// What each step last produced and from which inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus: Option<CorpusEntry>,
    pub train: Option<TrainEntry>,
    pub embeddings: Option<EmbedEntry>,
    #[serde(default)]
    pub indices: Vec<IndexEntry>,
    pub eval: Option<EvalEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec_pretty(self).expect("plain data");
        b.push(b'\n');
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySlot {
    pub label: String,
    pub tte_id: String,
    pub probe_recall: f64,
    pub file: FileRef,
}

/// On-disk active/standby pair maintained by `swap` and `rollback`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub active: Option<RegistrySlot>,
    pub standby: Option<RegistrySlot>,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec_pretty(self).expect("plain data");
        b.push(b'\n');
        b
    }
}
