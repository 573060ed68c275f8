use std::io::BufReader;

use super::manifest::file_id;
use super::{PipelineConfig, PipelineError, Workspace};
use crate::ann::{exact_knn, quantize_int8, Precision, VectorStore};
use crate::autodiff::Tensor;
use crate::corpus::{
    mine_for_queries, mine_hard_examples, read_corpus, read_interactions, Corpus, FileHeader, RelevanceOracle,
    TrainingRow,
};
use crate::eval::{evaluate_with, query_embeddings, EvalReport, EvalSet, ReportMeta};
use crate::towers::{truncate_matrix, FeatureHasher, ModelArtifact, Role};
use crate::trainer::{click_pairs, hard_sets, Featurized, HardSet, Palette, TrainData};

/// Corpus and interaction logs as written by `gen`.
pub struct LoadedCorpus {
    pub header: FileHeader,
    pub corpus: Corpus,
    pub interactions: Vec<TrainingRow>,
    /// Content id of the corpus file.
    pub corpus_id: String,
}

pub fn load_corpus(ws: &Workspace) -> Result<LoadedCorpus, PipelineError> {
    let cp = ws.input(&ws.corpus_file(), "gen")?;
    let ip = ws.input(&ws.interactions_file(), "gen")?;
    let bytes = std::fs::read(cp)?;
    let (header, corpus) = read_corpus(BufReader::new(bytes.as_slice()))?;
    let (_, interactions) = read_interactions(BufReader::new(std::fs::File::open(ip)?))?;
    Ok(LoadedCorpus {
        header,
        corpus,
        interactions,
        corpus_id: file_id(&bytes),
    })
}

/// Everything training and the training-time diagnostics need.
pub struct TrainInputs {
    pub data: TrainData,
    pub eval: EvalSet,
    /// Mined hard sets of the held-out eval queries, for margin and pairwise
    /// accuracy checks. Only sets with both sides non-empty are kept.
    pub held_out: Vec<HardSet>,
}

impl TrainInputs {
    pub fn build(
        corpus: &Corpus,
        interactions: &[TrainingRow],
        hasher: &FeatureHasher,
        cfg: &PipelineConfig,
    ) -> Result<Self, PipelineError> {
        let oracle = RelevanceOracle::new(cfg.seed);
        let features = Featurized::build(corpus, hasher)?;
        let pairs = click_pairs(corpus, interactions)?;
        let (maxp, negp) = (cfg.stage2.max_positives, cfg.stage2.negatives_per_positive);
        let mined = mine_hard_examples(corpus, interactions, &oracle, &cfg.mining)?;
        let hard = hard_sets(corpus, &mined, maxp, negp)?;
        let palette = Palette::held_out(corpus, cfg.palette.size, cfg.palette.block, cfg.seed)?;
        let eval = EvalSet::held_out(corpus);
        let ids: Vec<&str> = eval.queries.iter().map(|q| q.query_id.as_str()).collect();
        let held_out = hard_sets(
            corpus,
            &mine_for_queries(corpus, &ids, &oracle, &cfg.mining)?,
            maxp,
            negp,
        )?
        .into_iter()
        .filter(|s| !s.positives.is_empty() && !s.negatives.is_empty())
        .collect();
        Ok(Self {
            data: TrainData {
                features,
                pairs,
                hard,
                palette,
            },
            eval,
            held_out,
        })
    }
}

/// Full-width document-tower embeddings of every document, in corpus order.
pub fn doc_embeddings(model: &ModelArtifact, corpus: &Corpus) -> Result<(Vec<String>, Tensor<f32>), PipelineError> {
    let docs: Vec<_> = corpus.documents().map(|d| d.0).collect();
    let blobs = docs
        .iter()
        .map(|r| model.hasher.blob(r))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&str> = blobs.iter().map(String::as_str).collect();
    let e = model.doc.encode_batch(&model.hasher, &refs, Role::Document)?;
    Ok((docs.iter().map(|r| r.id.clone()).collect(), e))
}

/// Recall of `model` at prefix `cut` using an exact scan of each query's
/// candidate set, without building a graph.
pub fn exact_eval(
    model: &ModelArtifact,
    corpus: &Corpus,
    eval: &EvalSet,
    cut: usize,
    precision: Precision,
    ks: &[usize],
    label: &str,
) -> Result<EvalReport, PipelineError> {
    let (ids, full) = doc_embeddings(model, corpus)?;
    let e = truncate_matrix(&full, cut, &model.mrl_cuts)?;
    let mut store = VectorStore::fp32(ids, &e)?;
    if precision == Precision::Int8 {
        store = quantize_int8(&store, &(0..store.len()).collect::<Vec<_>>())?;
    }
    let q = query_embeddings(model, corpus, eval, cut)?;
    let meta = ReportMeta {
        label: label.to_string(),
        tte_id: model.tte_id.clone(),
        cut,
        precision,
        ef_search: 0,
        rerank_expansion: None,
    };
    Ok(evaluate_with(eval, &store.ids, ks, meta, |qi, cand, k| {
        Ok(exact_knn(&store, q.row(qi), k, Some(cand))?
            .into_iter()
            .map(|h| h.0)
            .collect())
    })?)
}
