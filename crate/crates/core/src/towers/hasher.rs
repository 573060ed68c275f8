use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::TowerError;
use crate::corpus::{parse_structured, serialize_plain, serialize_structured, CorpusRecord, Kind};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// JSON field map; features include `(field, token)` composites.
    Structured,
    /// Space-joined values; tokens only.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Document,
}

impl Role {
    pub fn of(record: &CorpusRecord) -> Self {
        if record.kind == Kind::Query {
            Role::Query
        } else {
            Role::Document
        }
    }
}

/// Signed hashing of tokens into a fixed number of buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHasher {
    pub num_buckets: u32,
    pub format: InputFormat,
    pub max_query_tokens: usize,
    pub max_doc_tokens: usize,
}

impl Default for FeatureHasher {
    fn default() -> Self {
        Self {
            num_buckets: 1 << 15,
            format: InputFormat::Structured,
            max_query_tokens: 128,
            max_doc_tokens: 1024,
        }
    }
}

fn hash_parts(parts: &[&str]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p.as_bytes());
        h.write_u8(0x1f);
    }
    h.finish()
}

impl FeatureHasher {
    pub fn new(num_buckets: u32, format: InputFormat) -> Result<Self, TowerError> {
        let h = Self {
            num_buckets,
            format,
            ..Self::default()
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), TowerError> {
        if !self.num_buckets.is_power_of_two() || self.num_buckets < 2 {
            return Err(TowerError::Config(format!(
                "num_buckets = {} is not a power of two",
                self.num_buckets
            )));
        }
        if self.max_query_tokens == 0 || self.max_doc_tokens == 0 {
            return Err(TowerError::Config("token limits must be positive".into()));
        }
        Ok(())
    }

    /// Text blob for a record in this hasher's input format.
    pub fn blob(&self, record: &CorpusRecord) -> Result<String, TowerError> {
        Ok(match self.format {
            InputFormat::Structured => serialize_structured(record)?,
            InputFormat::Plain => serialize_plain(record)?,
        })
    }

    fn limit(&self, role: Role) -> usize {
        match role {
            Role::Query => self.max_query_tokens,
            Role::Document => self.max_doc_tokens,
        }
    }

    /// Sparse unit-norm feature vector, sorted by bucket.
    pub fn features(&self, blob: &str, role: Role) -> Result<Vec<(u32, f32)>, TowerError> {
        let limit = self.limit(role);
        let mut keys: Vec<u64> = Vec::new();
        match self.format {
            InputFormat::Plain => {
                for t in tokenize(blob).iter().take(limit) {
                    keys.push(hash_parts(&[t]));
                }
            }
            InputFormat::Structured => {
                let fields = parse_structured(blob)?;
                let mut budget = limit;
                for (name, value) in &fields {
                    for t in tokenize(value) {
                        if budget == 0 {
                            break;
                        }
                        budget -= 1;
                        keys.push(hash_parts(&[&t]));
                        keys.push(hash_parts(&[name, &t]));
                    }
                }
            }
        }
        if keys.is_empty() {
            return Err(TowerError::EmptyInput);
        }
        let mask = u64::from(self.num_buckets - 1);
        let mut acc: BTreeMap<u32, f32> = BTreeMap::new();
        for k in keys {
            let bucket = (k & mask) as u32;
            let sign = if k >> 63 == 0 { 1.0 } else { -1.0 };
            *acc.entry(bucket).or_default() += sign;
        }
        let norm = acc.values().map(|v| v * v).sum::<f32>().sqrt();
        if norm == 0.0 {
            // Every bucket cancelled out.
            return Err(TowerError::EmptyInput);
        }
        Ok(acc
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|(b, v)| (b, v / norm))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, Market};

    fn record() -> CorpusRecord {
        CorpusRecord {
            id: "d".into(),
            kind: Kind::Store,
            market: Market::Usa,
            language: Language::En,
            fields: vec![
                ("category".into(), "mexican".into()),
                ("name".into(), "Taco Bar".into()),
            ],
            geo_cell: 0,
        }
    }

    #[test]
    fn deterministic_unit_norm_and_sorted() {
        let h = FeatureHasher::default();
        let blob = h.blob(&record()).unwrap();
        let a = h.features(&blob, Role::Document).unwrap();
        assert_eq!(a, h.features(&blob, Role::Document).unwrap());
        let n: f32 = a.iter().map(|(_, v)| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn plain_mode_ignores_field_names() {
        let plain = FeatureHasher {
            format: InputFormat::Plain,
            ..FeatureHasher::default()
        };
        let r = record();
        let mut renamed = r.clone();
        renamed.fields = vec![
            ("category".into(), "mexican".into()),
            ("title".into(), "Taco Bar".into()),
        ];
        let f = |h: &FeatureHasher, r: &CorpusRecord| h.features(&h.blob(r).unwrap(), Role::Document).unwrap();
        assert_eq!(f(&plain, &r), f(&plain, &renamed));
        let structured = FeatureHasher::default();
        assert_ne!(f(&structured, &r), f(&structured, &renamed));
        assert_ne!(f(&structured, &r), f(&plain, &r));
    }

    #[test]
    fn empty_token_set_is_an_error() {
        let h = FeatureHasher {
            format: InputFormat::Plain,
            ..FeatureHasher::default()
        };
        assert!(matches!(h.features(" ,, ", Role::Query), Err(TowerError::EmptyInput)));
    }

    #[test]
    fn query_tokens_are_capped() {
        let h = FeatureHasher {
            format: InputFormat::Plain,
            num_buckets: 1 << 20,
            ..FeatureHasher::default()
        };
        let long: String = (0..300).map(|i| format!("w{i} ")).collect();
        assert_eq!(h.features(&long, Role::Query).unwrap().len(), 128);
        assert_eq!(h.features(&long, Role::Document).unwrap().len(), 300);
    }

    #[test]
    fn bucket_count_must_be_power_of_two() {
        assert!(FeatureHasher::new(1000, InputFormat::Plain).is_err());
        assert!(FeatureHasher::new(1024, InputFormat::Plain).is_ok());
    }
}
