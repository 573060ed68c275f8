use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::ann::{Guardrail, HnswParams, Precision};
use crate::corpus::{CorpusSpec, MiningConfig};
use crate::rerank::HeadTrainConfig;
use crate::towers::{FeatureHasher, TowerConfig};
use crate::trainer::TrainConfig;

/// Output directories, relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub artifacts: PathBuf,
    pub indices: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            artifacts: "artifacts".into(),
            indices: "indices".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSpec {
    pub cut: usize,
    pub precision: Precision,
}

impl IndexSpec {
    pub fn file_name(&self) -> String {
        format!("{}-{}.idx", self.cut, self.precision)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.cut, self.precision)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaletteSettings {
    pub size: usize,
    pub block: usize,
}

impl Default for PaletteSettings {
    fn default() -> Self {
        Self { size: 512, block: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub ef_search: usize,
    /// Queries timed per index for the latency table.
    pub latency_probes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![20, 200, 500, 2000],
            ef_search: 128,
            latency_probes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSettings {
    pub cut: usize,
    pub expansion: usize,
    pub ks: Vec<usize>,
    pub train: HeadTrainConfig,
}

impl Default for RerankSettings {
    fn default() -> Self {
        Self {
            cut: 16,
            expansion: 10,
            ks: vec![20, 200, 500],
            train: HeadTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Stage-1 steps for every model an ablation trains from scratch.
    pub steps: usize,
    pub batch_sizes: Vec<usize>,
    /// Optimizer steps per batch size in the loss/batch study.
    pub batch_steps: usize,
    /// Prefix width compared between the MRL model, a non-MRL control and a
    /// fixed projection head.
    pub fc_cut: usize,
    pub ks: Vec<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_sizes: vec![64, 128, 192, 384, 512],
            batch_steps: 300,
            fc_cut: 16,
            ks: vec![20, 200, 500],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds tower initialization, the relevance oracle and the palette.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub hasher: FeatureHasher,
    pub towers: TowerConfig,
    pub mining: MiningConfig,
    pub palette: PaletteSettings,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub indices: Vec<IndexSpec>,
    pub hnsw: HnswParams,
    pub guardrail: Guardrail,
    pub eval: EvalSettings,
    pub rerank: RerankSettings,
    pub ablation: AblationSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 7;
        Self {
            seed,
            paths: Paths::default(),
            corpus: CorpusSpec {
                seed,
                ..CorpusSpec::default()
            },
            hasher: FeatureHasher::default(),
            towers: TowerConfig::default(),
            mining: MiningConfig::default(),
            palette: PaletteSettings::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            indices: vec![
                IndexSpec {
                    cut: 64,
                    precision: Precision::Fp32,
                },
                IndexSpec {
                    cut: 16,
                    precision: Precision::Fp32,
                },
                IndexSpec {
                    cut: 16,
                    precision: Precision::Int8,
                },
            ],
            hnsw: HnswParams::default(),
            guardrail: Guardrail::default(),
            eval: EvalSettings::default(),
            rerank: RerankSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        crate::fsutil::write_atomic(path, self.to_toml()?.as_bytes())?;
        Ok(())
    }

    /// Checks internal consistency and that every output directory can be
    /// placed under `root`.
    pub fn validate(&self, root: &Path) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !root.is_dir() {
            return bad(format!("root {} is not a directory", root.display()));
        }
        let p = &self.paths;
        let all = [&p.corpus, &p.artifacts, &p.indices, &p.reports];
        for (i, a) in all.iter().enumerate() {
            if a.as_os_str().is_empty() {
                return bad("empty output path".into());
            }
            let full = root.join(a);
            if full.exists() && !full.is_dir() {
                return bad(format!("{} exists and is not a directory", full.display()));
            }
            if all[..i].contains(a) {
                return bad(format!("output path {} used twice", a.display()));
            }
        }
        self.hasher
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.hasher.num_buckets != self.towers.num_buckets {
            return bad(format!(
                "hasher has {} buckets but towers expect {}",
                self.hasher.num_buckets, self.towers.num_buckets
            ));
        }
        self.corpus
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            t.validate()
                .map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        if self.stage1.stage != crate::trainer::Stage::InfoNce || self.stage2.stage != crate::trainer::Stage::TripletNce
        {
            return bad("stage1 must be infonce and stage2 triplet_nce".into());
        }
        let d = self.towers.d_full;
        for t in [&self.stage1, &self.stage2] {
            if t.mrl_cuts.iter().any(|&c| c == 0 || c > d) {
                return bad(format!("MRL cuts {:?} exceed width {d}", t.mrl_cuts));
            }
        }
        if self.stage1.mrl_cuts != self.stage2.mrl_cuts {
            return bad("both stages must use the same MRL cuts".into());
        }
        if self.indices.is_empty() {
            return bad("no index configured".into());
        }
        let cuts = self.serving_cuts();
        for ix in &self.indices {
            if !cuts.contains(&ix.cut) {
                return bad(format!("index cut {} is not one of the trained cuts {cuts:?}", ix.cut));
            }
        }
        if !self
            .indices
            .iter()
            .any(|ix| ix.cut == self.rerank.cut && ix.precision == Precision::Fp32)
        {
            return bad(format!(
                "reranking at cut {} needs an fp32 index at that cut",
                self.rerank.cut
            ));
        }
        if self.rerank.expansion == 0
            || self.eval.ks.is_empty()
            || self.eval.ks.contains(&0)
            || self.rerank.ks.contains(&0)
        {
            return bad("k lists and the rerank expansion must be positive".into());
        }
        if self.palette.block == 0 || self.palette.size < self.palette.block {
            return bad(format!("palette {:?} must hold at least one block", self.palette));
        }
        let a = &self.ablation;
        if !cuts.contains(&a.fc_cut) || a.batch_sizes.iter().any(|&b| b < 2) || a.ks.is_empty() || a.ks.contains(&0) {
            return bad(format!("invalid ablation settings {:?}", self.ablation));
        }
        Ok(())
    }

    /// Prefix widths the trained model can serve.
    pub fn serving_cuts(&self) -> Vec<usize> {
        if self.stage1.mrl_cuts.is_empty() {
            vec![self.towers.d_full]
        } else {
            self.stage1.mrl_cuts.clone()
        }
    }
}
