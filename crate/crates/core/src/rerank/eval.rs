use super::{retrieve_rerank, PairScorer, RerankConfig, RerankError};
use crate::ann::IndexArtifact;
use crate::corpus::Corpus;
use crate::eval::{evaluate_with, query_embeddings, EvalError, EvalReport, EvalSet, ReportMeta};
use crate::towers::ModelArtifact;

/// Held-out recall of retrieve-then-rerank. Each `k` is evaluated with its
/// own `expansion · k` pool, so the per-k lists are not prefixes of each
/// other.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_rerank(
    model: &ModelArtifact,
    index: &IndexArtifact,
    scorer: &impl PairScorer,
    corpus: &Corpus,
    eval: &EvalSet,
    ks: &[usize],
    expansion: usize,
    ef_search: usize,
    label: &str,
) -> Result<EvalReport, RerankError> {
    if model.tte_id != index.header.tte_id {
        return Err(RerankError::Version {
            expected: model.tte_id.clone(),
            found: index.header.tte_id.clone(),
        });
    }
    let cut = index.header.cut;
    let q = query_embeddings(model, corpus, eval, cut)?;
    let meta = ReportMeta {
        label: label.to_string(),
        tte_id: model.tte_id.clone(),
        cut,
        precision: index.header.precision,
        ef_search,
        rerank_expansion: Some(expansion),
    };
    let mut merged: Option<EvalReport> = None;
    for &k in ks {
        let cfg = RerankConfig {
            k,
            expansion,
            cut,
            encoder_tte_id: model.tte_id.clone(),
            ef_search,
        };
        let r = evaluate_with(eval, &index.store.ids, &[k], meta.clone(), |qi, cand, kk| {
            let out = retrieve_rerank(
                index,
                scorer,
                q.row(qi),
                &RerankConfig { k: kk, ..cfg.clone() },
                Some(cand),
            )
            .map_err(|e| EvalError::Contract(format!("rerank failed: {e}")))?;
            Ok(out.into_iter().map(|x| x.0).collect())
        })?;
        merged = Some(match merged {
            None => r,
            Some(mut acc) => {
                for (a, b) in acc.per_query.iter_mut().zip(r.per_query) {
                    a.recall.extend(b.recall);
                }
                acc.ks.push(k);
                acc
            }
        });
    }
    let acc = merged.ok_or_else(|| RerankError::Config("no k values to evaluate".into()))?;
    Ok(EvalReport::assemble(meta, acc.ks, acc.per_query, acc.excluded))
}
