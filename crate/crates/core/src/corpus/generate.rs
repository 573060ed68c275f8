use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rebalance::{balancing_caps, rebalance};
use super::{Corpus, CorpusError, CorpusRecord, Kind, Language, Latent, Market, TrainingRow, Vertical};
use crate::seed;

/// Generation parameters. Everything downstream is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub markets: Vec<Market>,
    pub verticals: Vec<Vertical>,
    /// Documents per (market, vertical).
    pub docs_per_vertical: usize,
    pub queries_per_market: usize,
    pub seed: u64,
    /// Latent topics per market; consecutive pairs form a family sharing vocabulary.
    pub topics_per_market: u32,
    pub cells_per_market: u32,
    /// Fraction of queries reserved for evaluation.
    pub held_out_fraction: f64,
    /// Fraction of documents whose names carry only family-level vocabulary.
    pub low_signal_fraction: f64,
    /// Probability that a logged click lands on an off-topic document.
    pub noise_click_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            markets: Market::ALL.to_vec(),
            verticals: Vertical::ALL.to_vec(),
            docs_per_vertical: 1000,
            queries_per_market: 600,
            seed: 7,
            topics_per_market: 8,
            cells_per_market: 2,
            held_out_fraction: 0.25,
            low_signal_fraction: 0.25,
            noise_click_rate: 0.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.markets.is_empty() || has_dupes(&self.markets) {
            return bad("markets must be a non-empty set".into());
        }
        if self.verticals.is_empty() || has_dupes(&self.verticals) {
            return bad("verticals must be a non-empty set".into());
        }
        if self.docs_per_vertical < 10 {
            return bad(format!("docs_per_vertical = {} < 10", self.docs_per_vertical));
        }
        if self.queries_per_market < 10 {
            return bad(format!("queries_per_market = {} < 10", self.queries_per_market));
        }
        if self.topics_per_market < 2 || !self.topics_per_market.is_multiple_of(2) {
            return bad(format!(
                "topics_per_market = {} must be even and >= 2",
                self.topics_per_market
            ));
        }
        if self.cells_per_market == 0 {
            return bad("cells_per_market must be >= 1".into());
        }
        for (name, v) in [
            ("held_out_fraction", self.held_out_fraction),
            ("low_signal_fraction", self.low_signal_fraction),
            ("noise_click_rate", self.noise_click_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

fn has_dupes<T: Ord + Copy>(xs: &[T]) -> bool {
    let mut v = xs.to_vec();
    v.sort_unstable();
    v.windows(2).any(|w| w[0] == w[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub spec: CorpusSpec,
    pub corpus: Corpus,
    pub interactions: Vec<TrainingRow>,
}

const SPECIFIC_WORDS: usize = 6;
const FAMILY_WORDS: usize = 4;
const CUE_WORDS: usize = 2;
const GENERIC_WORDS: usize = 48;

fn syllables(lang: Language) -> &'static [&'static str] {
    match lang {
        Language::En => &[
            "ba", "ri", "to", "ka", "mel", "son", "dri", "pa", "lo", "ven", "sha", "qui", "ber", "ton", "gla", "mi",
        ],
        Language::Es => &[
            "ca", "ma", "ro", "chi", "que", "lla", "pa", "ti", "gu", "sa", "le", "ño", "bo", "rra", "ji", "do",
        ],
        Language::Fr => &[
            "beau", "cre", "pain", "tou", "mou", "rai", "ga", "let", "chou", "fro", "ma", "ver", "blan", "ron", "quil",
            "deau",
        ],
        Language::Ja => &[
            "カ", "ラ", "メ", "ン", "ス", "シ", "ト", "ロ", "チ", "ヤ", "キ", "ソ", "バ", "ド", "リ", "ウ",
        ],
        Language::ZhTw => &[
            "牛", "肉", "麵", "雞", "排", "珍", "珠", "奶", "茶", "滷", "飯", "蚵", "仔", "煎", "豆", "花",
        ],
    }
}

/// Surface vocabulary for one language.
struct Vocabulary {
    specific: Vec<Vec<String>>,
    family: Vec<Vec<String>>,
    cue: BTreeMap<Vertical, Vec<String>>,
    generic: Vec<String>,
}

impl Vocabulary {
    fn build(lang: Language, topics: u32, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, &[0x766f_6361, lang as u64]);
        let syl = syllables(lang);
        let mut seen = HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng| loop {
            let w: String = (0..3).map(|_| *syl.choose(rng).expect("non-empty")).collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let specific = (0..topics)
            .map(|_| (0..SPECIFIC_WORDS).map(|_| word(&mut rng)).collect())
            .collect();
        let family = (0..topics / 2)
            .map(|_| (0..FAMILY_WORDS).map(|_| word(&mut rng)).collect())
            .collect();
        let cue = Vertical::ALL
            .iter()
            .map(|&v| (v, (0..CUE_WORDS).map(|_| word(&mut rng)).collect()))
            .collect();
        let generic = (0..GENERIC_WORDS).map(|_| word(&mut rng)).collect();
        Self {
            specific,
            family,
            cue,
            generic,
        }
    }

    fn spec(&self, topic: u32, rng: &mut ChaCha8Rng) -> &str {
        self.specific[topic as usize].choose(rng).expect("non-empty")
    }

    fn fam(&self, topic: u32, rng: &mut ChaCha8Rng) -> &str {
        self.family[(topic / 2) as usize].choose(rng).expect("non-empty")
    }

    fn gen(&self, rng: &mut ChaCha8Rng) -> &str {
        self.generic.choose(rng).expect("non-empty")
    }

    fn cue(&self, v: Vertical, rng: &mut ChaCha8Rng) -> &str {
        self.cue[&v].choose(rng).expect("non-empty")
    }
}

fn push_field(fields: &mut Vec<(String, String)>, name: &str, tokens: Vec<&str>) {
    fields.push((name.to_string(), tokens.join(" ")));
}

fn doc_name<'a>(voc: &'a Vocabulary, topic: u32, low_signal: bool, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let n = rng.random_range(2..=4);
    let mut toks = Vec::with_capacity(n);
    if low_signal {
        toks.push(voc.fam(topic, rng));
        for _ in 1..n {
            toks.push(if rng.random_bool(0.6) {
                voc.fam(topic, rng)
            } else {
                voc.gen(rng)
            });
        }
    } else {
        toks.push(voc.spec(topic, rng));
        for _ in 1..n {
            let u: f64 = rng.random();
            toks.push(if u < 0.4 {
                voc.spec(topic, rng)
            } else if u < 0.75 {
                voc.fam(topic, rng)
            } else {
                voc.gen(rng)
            });
        }
    }
    toks
}

fn doc_fields(
    voc: &Vocabulary,
    v: Vertical,
    topic: u32,
    topics: u32,
    low_signal: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, String)> {
    let mut fields = Vec::with_capacity(3);
    push_field(&mut fields, "name", doc_name(voc, topic, low_signal, rng));
    let family_hint = if rng.random_bool(0.5) {
        voc.fam(topic, rng)
    } else {
        voc.gen(rng)
    };
    push_field(&mut fields, "category", vec![voc.cue(v, rng), family_hint]);
    // The third field carries vocabulary of an unrelated topic; only its field
    // name marks it as non-topical.
    let other = (topic + rng.random_range(1..topics)) % topics;
    match v {
        Vertical::Store => {
            let n = rng.random_range(1..=3);
            let tags = (0..n)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        voc.spec(other, rng)
                    } else {
                        voc.gen(rng)
                    }
                })
                .collect();
            push_field(&mut fields, "tags", tags);
        }
        Vertical::Dish => {
            push_field(
                &mut fields,
                "store_name",
                vec![voc.spec(other, rng), voc.fam(other, rng)],
            );
        }
        Vertical::Item => {
            push_field(&mut fields, "brand", vec![voc.spec(other, rng)]);
        }
    }
    fields.sort();
    fields
}

fn query_terms<'a>(voc: &'a Vocabulary, v: Vertical, topic: u32, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let mut toks = vec![if rng.random_bool(0.8) {
        voc.spec(topic, rng)
    } else {
        voc.fam(topic, rng)
    }];
    if rng.random_bool(0.3) {
        toks.push(voc.fam(topic, rng));
    }
    if rng.random_bool(0.6) {
        toks.push(voc.cue(v, rng));
    }
    if rng.random_bool(0.15) {
        toks.push(voc.gen(rng));
    }
    toks.shuffle(rng);
    toks
}

fn vertical_share(v: Vertical) -> f64 {
    match v {
        Vertical::Store => 0.40,
        Vertical::Dish => 0.33,
        Vertical::Item => 0.27,
    }
}

struct DocRef {
    idx: usize,
    topic: u32,
}

/// Generates records, latent assignments and rebalanced interaction rows.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus, CorpusError> {
    spec.validate()?;
    let topics = spec.topics_per_market;
    let mut vocabs: BTreeMap<Language, Vocabulary> = BTreeMap::new();
    for m in &spec.markets {
        for &l in m.languages() {
            vocabs
                .entry(l)
                .or_insert_with(|| Vocabulary::build(l, topics, spec.seed));
        }
    }

    let mut records = Vec::new();
    let mut latents = Vec::new();
    // (market, vertical, cell) -> eligible documents
    let mut eligible: BTreeMap<(Market, Vertical, u32), Vec<DocRef>> = BTreeMap::new();
    let mut interactions = Vec::new();

    for (mi, &market) in spec.markets.iter().enumerate() {
        let langs = market.languages();
        // Cells are numbered globally so that a cell never spans markets.
        let cell_base = mi as u32 * spec.cells_per_market;
        for (vi, &v) in spec.verticals.iter().enumerate() {
            let mut rng = seed::rng(spec.seed, &[1, mi as u64, vi as u64]);
            for i in 0..spec.docs_per_vertical {
                let topic = rng.random_range(0..topics);
                let cell = cell_base + rng.random_range(0..spec.cells_per_market);
                let lang = if langs.len() > 1 && rng.random_bool(0.2) {
                    langs[1]
                } else {
                    langs[0]
                };
                let low = rng.random_bool(spec.low_signal_fraction);
                let fields = doc_fields(&vocabs[&lang], v, topic, topics, low, &mut rng);
                eligible.entry((market, v, cell)).or_default().push(DocRef {
                    idx: records.len(),
                    topic,
                });
                records.push(CorpusRecord {
                    id: format!("{}-{}-{i:05}", market.code(), v.code()),
                    kind: v.kind(),
                    market,
                    language: lang,
                    fields,
                    geo_cell: cell,
                });
                latents.push(Latent {
                    vertical: v,
                    topic,
                    held_out: false,
                });
            }
        }

        let shares: Vec<f64> = spec.verticals.iter().map(|&v| vertical_share(v)).collect();
        let total_share: f64 = shares.iter().sum();
        let mut rng = seed::rng(spec.seed, &[2, mi as u64]);
        for i in 0..spec.queries_per_market {
            let mut u = rng.random::<f64>() * total_share;
            let mut v = spec.verticals[spec.verticals.len() - 1];
            for (k, &s) in shares.iter().enumerate() {
                if u < s {
                    v = spec.verticals[k];
                    break;
                }
                u -= s;
            }
            let topic = rng.random_range(0..topics);
            let cell = cell_base + rng.random_range(0..spec.cells_per_market);
            let lang = if langs.len() > 1 && rng.random_bool(0.2) {
                langs[1]
            } else {
                langs[0]
            };
            let held_out = rng.random_bool(spec.held_out_fraction);
            let terms = query_terms(&vocabs[&lang], v, topic, &mut rng);
            let id = format!("{}-q-{i:05}", market.code());
            let fields = vec![
                ("country".to_string(), market.code().to_string()),
                ("language".to_string(), lang.code().to_string()),
                ("search_term".to_string(), terms.join(" ")),
            ];
            records.push(CorpusRecord {
                id: id.clone(),
                kind: Kind::Query,
                market,
                language: lang,
                fields,
                geo_cell: cell,
            });
            latents.push(Latent {
                vertical: v,
                topic,
                held_out,
            });
            if held_out {
                continue;
            }
            let Some(pool) = eligible.get(&(market, v, cell)) else {
                continue;
            };
            let on_topic: Vec<&DocRef> = pool.iter().filter(|d| d.topic == topic).collect();
            let off_topic: Vec<&DocRef> = pool.iter().filter(|d| d.topic != topic).collect();
            if on_topic.is_empty() {
                continue;
            }
            let clicks = rng.random_range(1..=4usize);
            let mut positive_ids: Vec<String> = Vec::new();
            let mut weights = Vec::new();
            for _ in 0..clicks {
                let (doc, rate) = if !off_topic.is_empty() && rng.random_bool(spec.noise_click_rate) {
                    (
                        off_topic.choose(&mut rng).expect("non-empty"),
                        rng.random_range(0.0..0.06),
                    )
                } else {
                    (
                        on_topic.choose(&mut rng).expect("non-empty"),
                        rng.random_range(0.04..0.5),
                    )
                };
                let did = &records[doc.idx].id;
                if !positive_ids.contains(did) {
                    positive_ids.push(did.clone());
                    weights.push(rate);
                }
            }
            let mut negative_ids = Vec::new();
            for _ in 0..3 {
                if let Some(doc) = off_topic.choose(&mut rng) {
                    let did = &records[doc.idx].id;
                    if !positive_ids.contains(did) && !negative_ids.contains(did) {
                        negative_ids.push(did.clone());
                    }
                }
            }
            interactions.push(TrainingRow {
                query_id: id,
                positive_ids,
                negative_ids,
                weights,
            });
        }
    }

    let corpus = Corpus::new(records, latents)?;
    let caps = balancing_caps(&corpus, &interactions);
    let interactions = rebalance(&corpus, &interactions, &caps, spec.seed);
    for row in &interactions {
        row.validate()?;
    }
    Ok(GeneratedCorpus {
        spec: spec.clone(),
        corpus,
        interactions,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::corpus::{write_corpus, write_interactions};

    fn small() -> CorpusSpec {
        CorpusSpec {
            docs_per_vertical: 120,
            queries_per_market: 60,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn rejects_small_counts() {
        let spec = CorpusSpec {
            docs_per_vertical: 9,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(CorpusError::Config(_))));
        let spec = CorpusSpec {
            queries_per_market: 5,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(CorpusError::Config(_))));
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let render = |g: &GeneratedCorpus| {
            let mut a = Vec::new();
            let mut b = Vec::new();
            write_corpus(&mut a, &g.spec, &g.corpus).unwrap();
            write_interactions(&mut b, g.spec.seed, &g.interactions).unwrap();
            (a, b)
        };
        let x = render(&generate_corpus(&small()).unwrap());
        let y = render(&generate_corpus(&small()).unwrap());
        assert_eq!(x, y);
        let other = render(&generate_corpus(&CorpusSpec { seed: 8, ..small() }).unwrap());
        assert_ne!(x.0, other.0);
    }

    #[test]
    fn every_market_vertical_pair_is_populated() {
        let g = generate_corpus(&small()).unwrap();
        let pairs: BTreeSet<(Market, Vertical)> = g.corpus.documents().map(|(r, l)| (r.market, l.vertical)).collect();
        assert_eq!(pairs.len(), 6 * 3);
    }

    #[test]
    fn positives_share_the_query_topic_and_lists_are_disjoint() {
        let g = generate_corpus(&small()).unwrap();
        assert!(!g.interactions.is_empty());
        for row in &g.interactions {
            row.validate().unwrap();
            for p in &row.positive_ids {
                assert_eq!(g.corpus.is_relevant(&row.query_id, p), Some(true));
            }
            assert!(!g.corpus.latent(&row.query_id).unwrap().held_out);
        }
    }

    #[test]
    fn records_satisfy_field_invariants() {
        let g = generate_corpus(&small()).unwrap();
        for r in g.corpus.records() {
            r.validate().unwrap();
            assert!(r.geo_cell < 12);
        }
    }

    #[test]
    fn positive_pairs_balanced_across_verticals() {
        let g = generate_corpus(&CorpusSpec {
            docs_per_vertical: 1000,
            seed: 7,
            ..CorpusSpec::default()
        })
        .unwrap();
        let mut per_vertical: BTreeMap<Vertical, usize> = BTreeMap::new();
        for row in &g.interactions {
            let v = g.corpus.get(&row.positive_ids[0]).unwrap().vertical().unwrap();
            *per_vertical.entry(v).or_default() += row.positive_ids.len();
        }
        let counts: Vec<f64> = per_vertical.values().map(|&c| c as f64).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        for c in &counts {
            assert!((c - mean).abs() / mean <= 0.10, "{per_vertical:?}");
        }
    }
}
