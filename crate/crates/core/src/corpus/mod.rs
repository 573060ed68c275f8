//! Synthetic multi-market, multi-vertical corpus with click-style interactions.
//!
//! Every query and document carries a latent `(vertical, topic)` assignment.
//! Ground-truth relevance is "same market, same vertical, same topic", which
//! makes recall exactly computable. Hard negatives arise from topic families
//! that share surface vocabulary.

mod generate;
mod io;
mod oracle;
mod rebalance;
mod serialize;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use generate::{generate_corpus, CorpusSpec, GeneratedCorpus};
pub use io::{
    read_corpus, read_interactions, write_corpus, write_interactions, FileHeader, CORPUS_SCHEMA, INTERACTIONS_SCHEMA,
};
pub use oracle::{mine_for_queries, mine_hard_examples, Label, MinedSet, MiningConfig, RelevanceOracle};
pub use rebalance::{balancing_caps, rebalance, GroupCaps};
pub use serialize::{parse_structured, serialize_plain, serialize_structured};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        CorpusError::Io(e.to_string())
    }
}

macro_rules! coded_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $code:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $code)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> &'static str {
                match self { $($name::$variant => $code),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(self.code())
            }
        }

        impl FromStr for $name {
            type Err = CorpusError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($code => Ok($name::$variant),)+
                    _ => Err(CorpusError::Format(format!("unknown {} `{s}`", stringify!($name)))),
                }
            }
        }
    };
}

coded_enum!(
    /// Record type.
    Kind { Query => "query", Store => "store", Dish => "dish", Item => "item" }
);
coded_enum!(Market { Usa => "USA", Can => "CAN", Mex => "MEX", Fra => "FRA", Jpn => "JPN", Twn => "TWN" });
coded_enum!(Language { En => "EN", Es => "ES", Fr => "FR", Ja => "JA", ZhTw => "ZH-TW" });
coded_enum!(
    /// Document verticals; a document's kind is its vertical.
    Vertical { Store => "store", Dish => "dish", Item => "item" }
);

impl Vertical {
    pub fn kind(self) -> Kind {
        match self {
            Vertical::Store => Kind::Store,
            Vertical::Dish => Kind::Dish,
            Vertical::Item => Kind::Item,
        }
    }
}

impl Kind {
    pub fn vertical(self) -> Option<Vertical> {
        match self {
            Kind::Query => None,
            Kind::Store => Some(Vertical::Store),
            Kind::Dish => Some(Vertical::Dish),
            Kind::Item => Some(Vertical::Item),
        }
    }
}

impl Market {
    /// Languages spoken in the market, most common first.
    pub fn languages(self) -> &'static [Language] {
        match self {
            Market::Usa => &[Language::En, Language::Es],
            Market::Can => &[Language::En, Language::Fr],
            Market::Mex => &[Language::Es],
            Market::Fra => &[Language::Fr],
            Market::Jpn => &[Language::Ja],
            Market::Twn => &[Language::ZhTw],
        }
    }
}

/// One query or document as a typed field map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub kind: Kind,
    pub market: Market,
    pub language: Language,
    pub fields: Vec<(String, String)>,
    pub geo_cell: u32,
}

pub const QUERY_FIELDS: [&str; 3] = ["search_term", "country", "language"];
pub const DOC_FIELDS: [&str; 2] = ["name", "category"];

impl CorpusRecord {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn vertical(&self) -> Option<Vertical> {
        self.kind.vertical()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        let mut names: Vec<&str> = self.fields.iter().map(|(k, _)| k.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate field name".into()));
        }
        let required: &[&str] = match self.kind {
            Kind::Query => &QUERY_FIELDS,
            _ => &DOC_FIELDS,
        };
        for r in required {
            if self.field(r).is_none() {
                return Err(invalid(format!("missing field `{r}`")));
            }
        }
        Ok(())
    }
}

/// List-centric training example: one query with its logged positives and negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub query_id: String,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    /// Synthetic interaction rates aligned with `positive_ids`.
    pub weights: Vec<f64>,
}

impl TrainingRow {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidRecord {
            id: self.query_id.clone(),
            reason: reason.to_string(),
        };
        if self.positive_ids.is_empty() {
            return Err(invalid("training row without positives"));
        }
        if self.weights.len() != self.positive_ids.len() {
            return Err(invalid("weights not aligned with positives"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("negative or non-finite weight"));
        }
        if self.positive_ids.iter().any(|p| self.negative_ids.contains(p)) {
            return Err(invalid("id in both positive and negative lists"));
        }
        Ok(())
    }
}

/// Hidden generative assignment of a record. Never visible to the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latent {
    pub vertical: Vertical,
    pub topic: u32,
    /// Queries reserved for evaluation; they have no logged interactions.
    #[serde(default)]
    pub held_out: bool,
}

/// Records plus their latent assignments, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<CorpusRecord>,
    latents: Vec<Latent>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(records: Vec<CorpusRecord>, latents: Vec<Latent>) -> Result<Self, CorpusError> {
        if records.len() != latents.len() {
            return Err(CorpusError::Config("one latent assignment per record required".into()));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if let Some(v) = r.vertical() {
                if v != latents[i].vertical {
                    return Err(CorpusError::InvalidRecord {
                        id: r.id.clone(),
                        reason: "latent vertical disagrees with kind".into(),
                    });
                }
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(CorpusError::InvalidRecord {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(Self {
            records,
            latents,
            by_id,
        })
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn latents(&self) -> &[Latent] {
        &self.latents
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusRecord> {
        self.index_of(id).map(|i| &self.records[i])
    }

    pub fn latent(&self, id: &str) -> Option<&Latent> {
        self.index_of(id).map(|i| &self.latents[i])
    }

    pub fn queries(&self) -> impl Iterator<Item = (&CorpusRecord, &Latent)> {
        self.records
            .iter()
            .zip(&self.latents)
            .filter(|(r, _)| r.kind == Kind::Query)
    }

    pub fn documents(&self) -> impl Iterator<Item = (&CorpusRecord, &Latent)> {
        self.records
            .iter()
            .zip(&self.latents)
            .filter(|(r, _)| r.kind != Kind::Query)
    }

    /// Ground truth: `doc` is relevant to `query` iff they share market,
    /// vertical and topic.
    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> Option<bool> {
        let (q, d) = (self.get(query_id)?, self.get(doc_id)?);
        let (lq, ld) = (self.latent(query_id)?, self.latent(doc_id)?);
        Some(d.kind != Kind::Query && q.market == d.market && lq.vertical == ld.vertical && lq.topic == ld.topic)
    }
}
