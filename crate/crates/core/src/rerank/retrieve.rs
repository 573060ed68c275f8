use serde::{Deserialize, Serialize};

use super::{FfnHead, RerankError};
use crate::ann::{rank_order, CandidateSet, IndexArtifact};

/// Second-stage scoring function over `(query, document)` vectors.
pub trait PairScorer {
    fn cut(&self) -> usize;
    fn score_many(&self, q: &[f32], docs: &[&[f32]]) -> Result<Vec<f32>, RerankError>;
}

impl PairScorer for FfnHead {
    fn cut(&self) -> usize {
        self.config.cut
    }

    fn score_many(&self, q: &[f32], docs: &[&[f32]]) -> Result<Vec<f32>, RerankError> {
        FfnHead::score_many(self, q, docs)
    }
}

/// Plain dot product, i.e. a head that reproduces first-stage scores.
#[derive(Debug, Clone, Copy)]
pub struct DotScorer {
    pub cut: usize,
}

impl PairScorer for DotScorer {
    fn cut(&self) -> usize {
        self.cut
    }

    fn score_many(&self, q: &[f32], docs: &[&[f32]]) -> Result<Vec<f32>, RerankError> {
        docs.iter()
            .map(|d| {
                if d.len() != q.len() {
                    return Err(RerankError::Dimension(format!("{} vs {} dims", d.len(), q.len())));
                }
                Ok(q.iter().zip(*d).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    /// Final list length.
    pub k: usize,
    /// First-stage pool is `expansion · k`.
    pub expansion: usize,
    pub cut: usize,
    /// Frozen encoder the index and head were built from.
    pub encoder_tte_id: String,
    pub ef_search: usize,
}

impl RerankConfig {
    pub fn new(k: usize, cut: usize, encoder_tte_id: &str) -> Self {
        Self {
            k,
            expansion: 10,
            cut,
            encoder_tte_id: encoder_tte_id.to_string(),
            ef_search: 128,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.expansion * self.k
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        if self.expansion == 0 || self.k == 0 {
            return Err(RerankError::Config(format!(
                "k {} and expansion {} must be at least 1",
                self.k, self.expansion
            )));
        }
        Ok(())
    }
}

/// Dot-product retrieval of `expansion · k` candidates, then re-scoring of
/// exactly that pool. Ties in the second score go to the lowest store index.
pub fn retrieve_rerank(
    index: &IndexArtifact,
    scorer: &impl PairScorer,
    q: &[f32],
    cfg: &RerankConfig,
    filter: Option<&CandidateSet>,
) -> Result<Vec<(u32, f32)>, RerankError> {
    cfg.validate()?;
    if index.header.cut != cfg.cut || scorer.cut() != cfg.cut {
        return Err(RerankError::Dimension(format!(
            "index cut {}, scorer cut {}, configured cut {}",
            index.header.cut,
            scorer.cut(),
            cfg.cut
        )));
    }
    if index.header.tte_id != cfg.encoder_tte_id {
        return Err(RerankError::Version {
            expected: cfg.encoder_tte_id.clone(),
            found: index.header.tte_id.clone(),
        });
    }
    if filter.is_some_and(|f| f.is_empty()) || index.store.is_empty() {
        return Ok(Vec::new());
    }
    let pool = index.search(q, cfg.pool_size(), cfg.ef_search, filter)?;
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let vectors: Vec<_> = pool.iter().map(|&(i, _)| index.store.vector(i as usize)).collect();
    let refs: Vec<&[f32]> = vectors.iter().map(|v| v.as_ref()).collect();
    let scores = scorer.score_many(q, &refs)?;
    let mut out: Vec<(u32, f32)> = pool.iter().map(|p| p.0).zip(scores).collect();
    out.sort_by(rank_order);
    out.truncate(cfg.k);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::ann::tests::random_store;
    use crate::ann::HnswParams;
    use crate::rerank::HeadConfig;

    fn index() -> IndexArtifact {
        IndexArtifact::build("tte-r", random_store(600, 8, 21), HnswParams::default()).unwrap()
    }

    #[test]
    fn unit_expansion_with_dot_scorer_keeps_first_stage_order() {
        let idx = index();
        let probes = random_store(30, 8, 22);
        let cfg = RerankConfig {
            expansion: 1,
            ..RerankConfig::new(25, 8, "tte-r")
        };
        for i in 0..probes.len() {
            let q = probes.vector(i);
            let first: Vec<u32> = idx
                .search(&q, 25, 128, None)
                .unwrap()
                .into_iter()
                .map(|x| x.0)
                .collect();
            let re: Vec<u32> = retrieve_rerank(&idx, &DotScorer { cut: 8 }, &q, &cfg, None)
                .unwrap()
                .into_iter()
                .map(|x| x.0)
                .collect();
            assert_eq!(re, first);
        }
    }

    #[test]
    fn constant_scores_fall_back_to_lowest_index() {
        let idx = index();
        let mut head = FfnHead::init(HeadConfig::for_cut(8), "tte-r", 1).unwrap();
        for t in head.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let q = idx.store.vector(0).into_owned();
        let cfg = RerankConfig::new(5, 8, "tte-r");
        let pool: Vec<u32> = idx
            .search(&q, 50, 128, None)
            .unwrap()
            .into_iter()
            .map(|x| x.0)
            .collect();
        let mut want = pool.clone();
        want.sort();
        want.truncate(5);
        let got: Vec<u32> = retrieve_rerank(&idx, &head, &q, &cfg, None)
            .unwrap()
            .into_iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn mismatches_are_rejected_and_empty_pools_give_nothing() {
        let idx = index();
        let q = vec![0.0; 8];
        let head = FfnHead::init(HeadConfig::for_cut(16), "tte-r", 1).unwrap();
        assert!(matches!(
            retrieve_rerank(&idx, &head, &q, &RerankConfig::new(5, 8, "tte-r"), None),
            Err(RerankError::Dimension(_))
        ));
        let dot = DotScorer { cut: 8 };
        assert!(matches!(
            retrieve_rerank(&idx, &dot, &q, &RerankConfig::new(5, 8, "tte-other"), None),
            Err(RerankError::Version { .. })
        ));
        let zero = RerankConfig {
            expansion: 0,
            ..RerankConfig::new(5, 8, "tte-r")
        };
        assert!(matches!(
            retrieve_rerank(&idx, &dot, &q, &zero, None),
            Err(RerankError::Config(_))
        ));
        let empty = CandidateSet::new(idx.store.len(), vec![]);
        assert!(
            retrieve_rerank(&idx, &dot, &q, &RerankConfig::new(5, 8, "tte-r"), Some(&empty))
                .unwrap()
                .is_empty()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn reranked_items_come_from_the_pool(seed in 0u64..1000, k in 1usize..40, expansion in 1usize..12) {
            let idx = index();
            let head = FfnHead::init(HeadConfig::for_cut(8), "tte-r", seed).unwrap();
            let q = random_store(1, 8, seed + 7).vector(0).into_owned();
            let cfg = RerankConfig { expansion, ..RerankConfig::new(k, 8, "tte-r") };
            let pool: HashSet<u32> = idx.search(&q, cfg.pool_size(), cfg.ef_search, None).unwrap().into_iter().map(|x| x.0).collect();
            let out = retrieve_rerank(&idx, &head, &q, &cfg, None).unwrap();
            prop_assert_eq!(out.len(), k.min(pool.len()));
            prop_assert!(out.iter().all(|x| pool.contains(&x.0)));
        }
    }
}
