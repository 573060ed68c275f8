use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainError;
use crate::autodiff::SparseRows;
use crate::container::fnv64;
use crate::corpus::{Corpus, Kind, MinedSet, TrainingRow, Vertical};
use crate::seed;
use crate::towers::{FeatureHasher, Role};

/// Hashed features for every corpus record, aligned with `corpus.records()`.
#[derive(Debug, Clone)]
pub struct Featurized {
    pub hasher: FeatureHasher,
    rows: Vec<Vec<(u32, f32)>>,
}

impl Featurized {
    pub fn build(corpus: &Corpus, hasher: &FeatureHasher) -> Result<Self, TrainError> {
        hasher.validate()?;
        let rows = corpus
            .records()
            .iter()
            .map(|r| hasher.features(&hasher.blob(r)?, Role::of(r)))
            .collect::<Result<_, _>>()?;
        Ok(Self { hasher: *hasher, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(u32, f32)] {
        &self.rows[i]
    }

    pub fn batch(&self, idx: &[usize]) -> Arc<SparseRows<f32>> {
        let mut rows = SparseRows::new(self.hasher.num_buckets as usize);
        for &i in idx {
            rows.push_row(self.rows[i].iter().copied());
        }
        Arc::new(rows)
    }
}

/// One logged (query, positive) pair by record index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub query: usize,
    pub doc: usize,
    pub weight: f64,
}

/// Mined positives and negatives of one query, by record index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardSet {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn index(corpus: &Corpus, id: &str) -> Result<usize, TrainError> {
    corpus
        .index_of(id)
        .ok_or_else(|| TrainError::Data(format!("unknown record `{id}`")))
}

/// Flattens list-centric rows into one pair per logged positive.
pub fn click_pairs(corpus: &Corpus, rows: &[TrainingRow]) -> Result<Vec<Pair>, TrainError> {
    let mut out = Vec::new();
    for row in rows {
        row.validate()?;
        let q = index(corpus, &row.query_id)?;
        for (p, &w) in row.positive_ids.iter().zip(&row.weights) {
            out.push(Pair {
                query: q,
                doc: index(corpus, p)?,
                weight: w,
            });
        }
    }
    Ok(out)
}

/// Caps each mined set at `max_positives` positives and
/// `negatives_per_positive` negatives per kept positive. Sets that end up
/// with no pairs are dropped.
pub fn hard_sets(
    corpus: &Corpus,
    mined: &[MinedSet],
    max_positives: usize,
    negatives_per_positive: usize,
) -> Result<Vec<HardSet>, TrainError> {
    let mut out = Vec::new();
    for m in mined {
        let positives: Vec<usize> = m
            .positives
            .iter()
            .take(max_positives)
            .map(|p| index(corpus, p))
            .collect::<Result<_, _>>()?;
        let neg_cap = positives.len().max(1) * negatives_per_positive;
        let negatives: Vec<usize> = m
            .negatives
            .iter()
            .take(neg_cap)
            .map(|n| index(corpus, n))
            .collect::<Result<_, _>>()?;
        if positives.is_empty() && negatives.is_empty() {
            continue;
        }
        out.push(HardSet {
            query: index(corpus, &m.query_id)?,
            positives,
            negatives,
        });
    }
    Ok(out)
}

/// Fixed held-out (query, relevant document) pairs for Hit@k tracking,
/// scored in blocks with the other block members as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub pairs: Vec<(usize, usize)>,
    pub block: usize,
}

impl Palette {
    /// Up to `size` held-out queries, each paired with one relevant document
    /// from its own cell. `size` is rounded down to whole blocks.
    pub fn held_out(corpus: &Corpus, size: usize, block: usize, seed_value: u64) -> Result<Self, TrainError> {
        let mut by_topic: BTreeMap<(u32, Vertical, u32), Vec<usize>> = BTreeMap::new();
        for (i, (r, l)) in corpus.records().iter().zip(corpus.latents()).enumerate() {
            if r.kind != Kind::Query {
                by_topic.entry((r.geo_cell, l.vertical, l.topic)).or_default().push(i);
            }
        }
        let mut rng = seed::rng(seed_value, &[0x7061_6c65]);
        let mut pairs = Vec::new();
        for (i, (r, l)) in corpus.records().iter().zip(corpus.latents()).enumerate() {
            if r.kind != Kind::Query || !l.held_out {
                continue;
            }
            if let Some(docs) = by_topic.get(&(r.geo_cell, l.vertical, l.topic)) {
                pairs.push((i, docs[rng.random_range(0..docs.len())]));
            }
        }
        pairs.shuffle(&mut rng);
        Self::from_pairs(pairs, size, block)
    }

    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, size: usize, block: usize) -> Result<Self, TrainError> {
        if block < 2 {
            return Err(TrainError::Config("palette blocks need at least two rows".into()));
        }
        let n = size.min(pairs.len()) / block * block;
        if n == 0 {
            return Err(TrainError::Data(format!(
                "{} palette pairs do not fill one block of {block}",
                pairs.len()
            )));
        }
        pairs.truncate(n);
        Ok(Self { pairs, block })
    }
}

/// Everything a training run reads, fixed for the whole run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub features: Featurized,
    pub pairs: Vec<Pair>,
    pub hard: Vec<HardSet>,
    pub palette: Palette,
}

impl TrainData {
    /// Content fingerprint recorded alongside the run configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut b = Vec::new();
        b.extend_from_slice(&serde_json::to_vec(&self.features.hasher).expect("plain data"));
        for i in 0..self.features.len() {
            for &(c, v) in self.features.row(i) {
                b.extend_from_slice(&c.to_le_bytes());
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.push(0xff);
        }
        for p in &self.pairs {
            b.extend_from_slice(&(p.query as u64).to_le_bytes());
            b.extend_from_slice(&(p.doc as u64).to_le_bytes());
            b.extend_from_slice(&p.weight.to_le_bytes());
        }
        for h in &self.hard {
            b.extend_from_slice(&(h.query as u64).to_le_bytes());
            for &x in h.positives.iter().chain([usize::MAX].iter()).chain(&h.negatives) {
                b.extend_from_slice(&(x as u64).to_le_bytes());
            }
        }
        for &(q, d) in &self.palette.pairs {
            b.extend_from_slice(&(q as u64).to_le_bytes());
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        fnv64(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, Market};

    fn small() -> crate::corpus::GeneratedCorpus {
        generate_corpus(&CorpusSpec {
            markets: vec![Market::Usa],
            docs_per_vertical: 60,
            queries_per_market: 80,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn pairs_cover_every_logged_positive() {
        let g = small();
        let pairs = click_pairs(&g.corpus, &g.interactions).unwrap();
        let total: usize = g.interactions.iter().map(|r| r.positive_ids.len()).sum();
        assert_eq!(pairs.len(), total);
        for p in &pairs {
            let (q, d) = (&g.corpus.records()[p.query], &g.corpus.records()[p.doc]);
            assert_eq!(q.kind, Kind::Query);
            assert_ne!(d.kind, Kind::Query);
        }
    }

    #[test]
    fn hard_sets_respect_caps() {
        let g = small();
        let oracle = crate::corpus::RelevanceOracle::new(1);
        let mined =
            crate::corpus::mine_hard_examples(&g.corpus, &g.interactions, &oracle, &Default::default()).unwrap();
        let sets = hard_sets(&g.corpus, &mined, 2, 3).unwrap();
        assert!(!sets.is_empty());
        for s in &sets {
            assert!(s.positives.len() <= 2);
            assert!(s.negatives.len() <= 3 * s.positives.len().max(1));
        }
    }

    #[test]
    fn palette_pairs_are_relevant_and_held_out() {
        let g = small();
        let p = Palette::held_out(&g.corpus, 64, 8, 3).unwrap();
        assert_eq!(p.pairs.len() % 8, 0);
        for &(q, d) in &p.pairs {
            let (qr, dr) = (&g.corpus.records()[q], &g.corpus.records()[d]);
            assert!(g.corpus.latents()[q].held_out);
            assert!(g.corpus.is_relevant(&qr.id, &dr.id).unwrap());
            assert_eq!(qr.geo_cell, dr.geo_cell);
        }
        assert_eq!(p, Palette::held_out(&g.corpus, 64, 8, 3).unwrap());
    }
}
