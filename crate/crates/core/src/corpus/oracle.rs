use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, CorpusRecord, Kind, TrainingRow};
use crate::seed;
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    HardPositive,
    HardNegative,
    Irrelevant,
}

/// Rule-based relevance judge over (query, document) pairs.
///
/// A document is a hard positive when it shares the query's market, vertical
/// and topic. It is a hard negative when it is in the same market and either
/// matches the topic in another vertical or shares a surface token with the
/// search term. Everything else is irrelevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelevanceOracle {
    pub seed: u64,
}

/// Surface tokens of a document, excluding the category field which carries
/// vertical-wide cue words.
fn doc_surface(doc: &CorpusRecord) -> BTreeSet<String> {
    doc.fields
        .iter()
        .filter(|(k, _)| k != "category")
        .flat_map(|(_, v)| tokenize(v))
        .collect()
}

fn query_surface(query: &CorpusRecord) -> BTreeSet<String> {
    tokenize(query.field("search_term").unwrap_or_default())
        .into_iter()
        .collect()
}

impl RelevanceOracle {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn label(&self, corpus: &Corpus, query_id: &str, doc_id: &str) -> Result<Label, CorpusError> {
        let missing = |id: &str| CorpusError::Oracle(format!("no record or latent for `{id}`"));
        let q = corpus.get(query_id).ok_or_else(|| missing(query_id))?;
        let d = corpus.get(doc_id).ok_or_else(|| missing(doc_id))?;
        let lq = corpus.latent(query_id).ok_or_else(|| missing(query_id))?;
        let ld = corpus.latent(doc_id).ok_or_else(|| missing(doc_id))?;
        if q.kind != Kind::Query || d.kind == Kind::Query {
            return Err(CorpusError::Oracle(format!(
                "`{query_id}` / `{doc_id}` is not a (query, document) pair"
            )));
        }
        if q.market != d.market {
            return Ok(Label::Irrelevant);
        }
        if lq.topic == ld.topic {
            return Ok(if lq.vertical == ld.vertical {
                Label::HardPositive
            } else {
                Label::HardNegative
            });
        }
        let surface = doc_surface(d);
        if query_surface(q).iter().any(|t| surface.contains(t)) {
            Ok(Label::HardNegative)
        } else {
            Ok(Label::Irrelevant)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Logged positives with an interaction rate below this are outliers.
    pub rate_floor: f64,
    /// Negatives kept per positive.
    pub negatives_per_positive: usize,
    /// Oracle-confirmed positives added beyond the logged ones.
    pub extra_positives: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            rate_floor: 0.05,
            negatives_per_positive: 4,
            extra_positives: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedSet {
    pub query_id: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// Per-market token index over document surfaces.
struct SurfaceIndex<'a> {
    corpus: &'a Corpus,
    postings: HashMap<(super::Market, String), Vec<usize>>,
    /// (cell, vertical, topic) -> document indices.
    topical: BTreeMap<(u32, super::Vertical, u32), Vec<usize>>,
}

impl<'a> SurfaceIndex<'a> {
    fn build(corpus: &'a Corpus) -> Self {
        let mut postings: HashMap<_, Vec<usize>> = HashMap::new();
        let mut topical: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, (r, l)) in corpus.records().iter().zip(corpus.latents()).enumerate() {
            if r.kind == Kind::Query {
                continue;
            }
            for t in doc_surface(r) {
                postings.entry((r.market, t)).or_default().push(i);
            }
            topical.entry((r.geo_cell, l.vertical, l.topic)).or_default().push(i);
        }
        Self {
            corpus,
            postings,
            topical,
        }
    }

    fn confusable(&self, query: &CorpusRecord) -> Vec<usize> {
        let mut hits = BTreeSet::new();
        for t in query_surface(query) {
            if let Some(p) = self.postings.get(&(query.market, t)) {
                hits.extend(p.iter().copied());
            }
        }
        hits.into_iter().collect()
    }

    fn mine(
        &self,
        oracle: &RelevanceOracle,
        cfg: &MiningConfig,
        query_id: &str,
        logged: &[(String, f64)],
    ) -> Result<MinedSet, CorpusError> {
        let corpus = self.corpus;
        let q = corpus
            .get(query_id)
            .ok_or_else(|| CorpusError::Oracle(format!("unknown query `{query_id}`")))?;
        let lq = corpus.latent(query_id).expect("record implies latent");
        let mut rng = seed::rng(
            oracle.seed,
            &[0x6d69_6e65, corpus.index_of(query_id).unwrap_or(0) as u64],
        );

        let mut positives = Vec::new();
        for (id, rate) in logged {
            if *rate >= cfg.rate_floor
                && oracle.label(corpus, query_id, id)? == Label::HardPositive
                && !positives.contains(id)
            {
                positives.push(id.clone());
            }
        }
        let mut extra: Vec<usize> = self
            .topical
            .get(&(q.geo_cell, lq.vertical, lq.topic))
            .cloned()
            .unwrap_or_default();
        extra.shuffle(&mut rng);
        let mut added = 0;
        for i in extra {
            if added == cfg.extra_positives {
                break;
            }
            let id = &corpus.records()[i].id;
            if positives.contains(id) {
                continue;
            }
            if oracle.label(corpus, query_id, id)? == Label::HardPositive {
                positives.push(id.clone());
                added += 1;
            }
        }

        let mut pool = Vec::new();
        for i in self.confusable(q) {
            let id = &corpus.records()[i].id;
            if oracle.label(corpus, query_id, id)? == Label::HardNegative {
                pool.push(id.clone());
            }
        }
        pool.shuffle(&mut rng);
        // Confusers the query could actually be served come first: same cell
        // and vertical, then same vertical elsewhere, then everything else.
        pool.sort_by_key(|id| {
            let d = corpus.get(id).expect("mined from corpus");
            let v = corpus.latent(id).expect("record implies latent").vertical;
            match (v == lq.vertical, d.geo_cell == q.geo_cell) {
                (true, true) => 0u8,
                (true, false) => 1,
                _ => 2,
            }
        });
        pool.truncate(cfg.negatives_per_positive * positives.len().max(1));
        Ok(MinedSet {
            query_id: query_id.to_string(),
            positives,
            negatives: pool,
        })
    }
}

/// Builds P(q) and N(q) for every logged query.
pub fn mine_hard_examples(
    corpus: &Corpus,
    interactions: &[TrainingRow],
    oracle: &RelevanceOracle,
    cfg: &MiningConfig,
) -> Result<Vec<MinedSet>, CorpusError> {
    let index = SurfaceIndex::build(corpus);
    interactions
        .iter()
        .map(|row| {
            let logged: Vec<(String, f64)> = row
                .positive_ids
                .iter()
                .cloned()
                .zip(row.weights.iter().copied())
                .collect();
            index.mine(oracle, cfg, &row.query_id, &logged)
        })
        .collect()
}

/// Mined sets for queries without logs, e.g. held-out evaluation queries.
pub fn mine_for_queries(
    corpus: &Corpus,
    query_ids: &[&str],
    oracle: &RelevanceOracle,
    cfg: &MiningConfig,
) -> Result<Vec<MinedSet>, CorpusError> {
    let index = SurfaceIndex::build(corpus);
    query_ids.iter().map(|q| index.mine(oracle, cfg, q, &[])).collect()
}
