//! File-based lifecycle: generate a corpus, train both stages and the rerank
//! head, embed documents, build and guard indices, evaluate, swap and report.
//!
//! Every step reads its inputs from the workspace, stages its outputs in a
//! scratch directory and moves them into place only once the whole step has
//! succeeded.

mod ablate;
mod config;
mod data;
mod embed;
mod manifest;
mod stage;
mod steps;

pub use ablate::{
    batch_sensitivity, degradation, input_format, mrl_vs_fc, rerank_lift, BatchRow, FormatRow, MrlStudy, RerankLiftRow,
    Study,
};
pub use config::{AblationSettings, EvalSettings, IndexSpec, PaletteSettings, Paths, PipelineConfig, RerankSettings};
pub use data::{doc_embeddings, exact_eval, load_corpus, LoadedCorpus, TrainInputs};
pub use embed::{DeltaStats, EmbeddingSet, EMBEDDINGS_KIND, EMBEDDINGS_SCHEMA};
pub use manifest::{FileRef, IndexEntry, Manifest, Registry, RegistrySlot};
pub use steps::{
    embed, eval, gen, index, report, rollback, swap, train, EvalOutcome, IndexOutcome, Lineage, TrainSummary,
};

use std::path::{Path, PathBuf};

use crate::ann::AnnError;
use crate::autodiff::NumericsError;
use crate::container::ContainerError;
use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::rerank::RerankError;
use crate::towers::TowerError;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("version chain broken: {0}")]
    Version(String),
    #[error("guardrail failed for {label}: probe recall {recall:.4} below {min:.4}")]
    Guardrail { label: String, recall: f64, min: f64 },
    #[error("missing input {}: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit status: 1 for a failed guardrail, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Guardrail { .. } => 1,
            _ => 2,
        }
    }
}

/// A validated config together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: PipelineConfig,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self, PipelineError> {
        let root = root.into();
        config.validate(&root)?;
        Ok(Self { root, config })
    }

    /// Loads a config file; its directory becomes the workspace root.
    pub fn open(config_path: &Path) -> Result<Self, PipelineError> {
        let config = PipelineConfig::load(config_path)?;
        let root = match config_path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Self::new(root, config)
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn corpus_file(&self) -> PathBuf {
        self.config.paths.corpus.join("corpus.jsonl")
    }

    pub fn interactions_file(&self) -> PathBuf {
        self.config.paths.corpus.join("interactions.jsonl")
    }

    pub fn stage1_file(&self) -> PathBuf {
        self.config.paths.artifacts.join("stage1.model")
    }

    pub fn model_file(&self) -> PathBuf {
        self.config.paths.artifacts.join("model.bin")
    }

    pub fn head_file(&self) -> PathBuf {
        self.config.paths.artifacts.join("head.bin")
    }

    pub fn embeddings_file(&self) -> PathBuf {
        self.config.paths.artifacts.join("embeddings.bin")
    }

    pub fn index_file(&self, spec: &IndexSpec) -> PathBuf {
        self.config.paths.indices.join(spec.file_name())
    }

    pub fn registry_file(&self) -> PathBuf {
        self.config.paths.indices.join("registry.json")
    }

    pub fn report_file(&self, name: &str) -> PathBuf {
        self.config.paths.reports.join(name)
    }

    pub fn manifest_file(&self) -> PathBuf {
        PathBuf::from("manifest.json")
    }

    /// Absolute path of a required input, or a `Missing` error naming the
    /// step that produces it.
    pub fn input(&self, rel: &Path, producer: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(PipelineError::Missing {
                path: p,
                hint: format!("run `{producer}` first"),
            });
        }
        Ok(p)
    }
}
