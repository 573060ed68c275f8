use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::report::{EvalReport, QueryRecall, ReportMeta};
use super::EvalError;
use crate::ann::{CandidateSet, IndexArtifact};
use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Kind, Market, Vertical};
use crate::towers::{truncate_matrix, ModelArtifact, Role};

/// One (query, cell) evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query_id: String,
    pub record: usize,
    pub geo_cell: u32,
    pub market: Market,
    pub vertical: Vertical,
    /// Relevant documents inside the query's candidate set.
    pub positives: Vec<String>,
}

/// Documents grouped by (geo cell, vertical), in corpus order.
#[derive(Debug, Clone, Default)]
pub struct CandidateIndex {
    groups: BTreeMap<(u32, Vertical), Vec<String>>,
}

impl CandidateIndex {
    pub fn build(corpus: &Corpus) -> Self {
        let mut groups: BTreeMap<_, Vec<String>> = BTreeMap::new();
        for (r, l) in corpus.documents() {
            groups.entry((r.geo_cell, l.vertical)).or_default().push(r.id.clone());
        }
        Self { groups }
    }

    pub fn get(&self, geo_cell: u32, vertical: Vertical) -> &[String] {
        self.groups.get(&(geo_cell, vertical)).map_or(&[], |v| v.as_slice())
    }
}

/// Eligible documents for `q`: same geo cell and vertical. Linear scan.
pub fn build_candidate_set(corpus: &Corpus, q: &EvalQuery) -> Vec<String> {
    corpus
        .documents()
        .filter(|(r, l)| r.geo_cell == q.geo_cell && l.vertical == q.vertical)
        .map(|(r, _)| r.id.clone())
        .collect()
}

/// `|top-k ∩ positives| / |positives|`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], positives: &[S], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::Contract("k must be at least 1".into()));
    }
    if positives.is_empty() {
        return Err(EvalError::Contract("recall over an empty positive set".into()));
    }
    let pos: HashSet<&str> = positives.iter().map(|p| p.as_ref()).collect();
    let hits = ranked.iter().take(k).filter(|r| pos.contains(r.as_ref())).count();
    Ok(hits as f64 / pos.len() as f64)
}

/// Held-out queries with their ground truth and candidate sets.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub queries: Vec<EvalQuery>,
    /// Held-out queries dropped because no relevant document is eligible.
    pub excluded: usize,
    pub candidates: CandidateIndex,
}

impl EvalSet {
    pub fn held_out(corpus: &Corpus) -> Self {
        let candidates = CandidateIndex::build(corpus);
        let mut queries = Vec::new();
        let mut excluded = 0;
        for (i, (r, l)) in corpus.records().iter().zip(corpus.latents()).enumerate() {
            if r.kind != Kind::Query || !l.held_out {
                continue;
            }
            let positives: Vec<String> = candidates
                .get(r.geo_cell, l.vertical)
                .iter()
                .filter(|d| corpus.is_relevant(&r.id, d) == Some(true))
                .cloned()
                .collect();
            if positives.is_empty() {
                excluded += 1;
                continue;
            }
            queries.push(EvalQuery {
                query_id: r.id.clone(),
                record: i,
                geo_cell: r.geo_cell,
                market: r.market,
                vertical: l.vertical,
                positives,
            });
        }
        Self {
            queries,
            excluded,
            candidates,
        }
    }

    pub fn candidates_for(&self, q: &EvalQuery) -> &[String] {
        self.candidates.get(q.geo_cell, q.vertical)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub ks: Vec<usize>,
    pub ef_search: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            ks: vec![20, 200, 500, 2000],
            ef_search: 128,
        }
    }
}

/// Runs a ranker over every eval query. `rank(i, candidates, k)` returns up
/// to `k` store positions for query `i`, best first, drawn from `candidates`.
pub fn evaluate_with<F>(
    eval: &EvalSet,
    store_ids: &[String],
    ks: &[usize],
    meta: ReportMeta,
    mut rank: F,
) -> Result<EvalReport, EvalError>
where
    F: FnMut(usize, &CandidateSet, usize) -> Result<Vec<u32>, EvalError>,
{
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::Contract(format!(
            "k list {ks:?} must be non-empty and positive"
        )));
    }
    let pos_of: HashMap<&str, u32> = store_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();
    let kmax = *ks.iter().max().expect("non-empty");
    let mut per_query = Vec::with_capacity(eval.queries.len());
    for (qi, q) in eval.queries.iter().enumerate() {
        let members = eval
            .candidates_for(q)
            .iter()
            .map(|d| {
                pos_of
                    .get(d.as_str())
                    .copied()
                    .ok_or_else(|| EvalError::Contract(format!("candidate `{d}` missing from the index")))
            })
            .collect::<Result<Vec<u32>, _>>()?;
        let cand = CandidateSet::new(store_ids.len(), members);
        let ranked = rank(qi, &cand, kmax.min(cand.len()))?;
        if let Some(&bad) = ranked.iter().find(|&&r| !cand.contains(r)) {
            return Err(EvalError::Contract(format!(
                "ranker returned `{}` outside the candidate set of {}",
                store_ids[bad as usize], q.query_id
            )));
        }
        let ranked_ids: Vec<&str> = ranked.iter().map(|&r| store_ids[r as usize].as_str()).collect();
        let positives: Vec<&str> = q.positives.iter().map(String::as_str).collect();
        let recall = ks
            .iter()
            .map(|&k| recall_at_k(&ranked_ids, &positives, k))
            .collect::<Result<Vec<f64>, _>>()?;
        per_query.push(QueryRecall {
            query_id: q.query_id.clone(),
            market: q.market,
            vertical: q.vertical,
            recall,
        });
    }
    Ok(EvalReport::assemble(meta, ks.to_vec(), per_query, eval.excluded))
}

/// Query-tower embeddings of every eval query, truncated to `cut`.
pub fn query_embeddings(
    model: &ModelArtifact,
    corpus: &Corpus,
    eval: &EvalSet,
    cut: usize,
) -> Result<Tensor<f32>, EvalError> {
    let blobs = eval
        .queries
        .iter()
        .map(|q| model.hasher.blob(&corpus.records()[q.record]))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&str> = blobs.iter().map(String::as_str).collect();
    let full = model.query.encode_batch(&model.hasher, &refs, Role::Query)?;
    Ok(truncate_matrix(&full, cut, &model.mrl_cuts)?)
}

/// Retrieval recall of `model` against `index` over each query's candidate set.
pub fn run_protocol(
    model: &ModelArtifact,
    index: &IndexArtifact,
    corpus: &Corpus,
    eval: &EvalSet,
    cfg: &ProtocolConfig,
    label: &str,
) -> Result<EvalReport, EvalError> {
    if model.tte_id != index.header.tte_id {
        return Err(EvalError::Version {
            model: model.tte_id.clone(),
            index: index.header.tte_id.clone(),
        });
    }
    let q = query_embeddings(model, corpus, eval, index.header.cut)?;
    let meta = ReportMeta {
        label: label.to_string(),
        tte_id: model.tte_id.clone(),
        cut: index.header.cut,
        precision: index.header.precision,
        ef_search: cfg.ef_search,
        rerank_expansion: None,
    };
    evaluate_with(eval, &index.store.ids, &cfg.ks, meta, |qi, cand, k| {
        let hits = index.search(q.row(qi), k, cfg.ef_search, Some(cand))?;
        Ok(hits.into_iter().map(|h| h.0).collect())
    })
}
