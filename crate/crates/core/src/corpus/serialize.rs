use std::collections::BTreeMap;

use super::{CorpusError, CorpusRecord};

fn canonical_fields(record: &CorpusRecord) -> Result<BTreeMap<&str, &str>, CorpusError> {
    let mut map = BTreeMap::new();
    for (k, v) in &record.fields {
        if let Some(c) = k.chars().chain(v.chars()).find(|c| c.is_control()) {
            return Err(CorpusError::Encoding(format!(
                "record `{}` field `{}` contains control character U+{:04X}",
                record.id,
                k.escape_debug(),
                c as u32
            )));
        }
        if map.insert(k.as_str(), v.as_str()).is_some() {
            return Err(CorpusError::InvalidRecord {
                id: record.id.clone(),
                reason: format!("duplicate field `{k}`"),
            });
        }
    }
    Ok(map)
}

/// Canonical JSON object of the record's fields: keys in byte order, values
/// escaped, no whitespace.
pub fn serialize_structured(record: &CorpusRecord) -> Result<String, CorpusError> {
    let map = canonical_fields(record)?;
    serde_json::to_string(&map).map_err(|e| CorpusError::Encoding(e.to_string()))
}

/// Field values only, space-joined in canonical key order.
pub fn serialize_plain(record: &CorpusRecord) -> Result<String, CorpusError> {
    let map = canonical_fields(record)?;
    Ok(map.into_values().collect::<Vec<_>>().join(" "))
}

/// Inverse of [`serialize_structured`]; fields come back in canonical order.
pub fn parse_structured(blob: &str) -> Result<Vec<(String, String)>, CorpusError> {
    let map: BTreeMap<String, String> =
        serde_json::from_str(blob).map_err(|e| CorpusError::Format(format!("structured blob: {e}")))?;
    Ok(map.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::{Kind, Language, Market};

    fn record(fields: Vec<(&str, &str)>) -> CorpusRecord {
        CorpusRecord {
            id: "d1".into(),
            kind: Kind::Store,
            market: Market::Usa,
            language: Language::En,
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            geo_cell: 0,
        }
    }

    #[test]
    fn structured_keeps_field_names_plain_drops_them() {
        let r = record(vec![("name", "Taco Bar")]);
        let s = serialize_structured(&r).unwrap();
        assert_eq!(s, r#"{"name":"Taco Bar"}"#);
        let p = serialize_plain(&r).unwrap();
        assert_eq!(p, "Taco Bar");
        assert!(!p.contains("name"));
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let a = record(vec![("name", "Taco Bar"), ("category", "mexican")]);
        let b = record(vec![("category", "mexican"), ("name", "Taco Bar")]);
        assert_eq!(serialize_structured(&a).unwrap(), serialize_structured(&b).unwrap());
        assert_eq!(serialize_plain(&a).unwrap(), serialize_plain(&b).unwrap());
    }

    #[test]
    fn quotes_and_unicode_are_escaped_and_round_trip() {
        let r = record(vec![("name", "Joe's \"Best\" \\ 牛肉麵"), ("category", "noodles")]);
        let s = serialize_structured(&r).unwrap();
        let parsed = parse_structured(&s).unwrap();
        assert_eq!(parsed[1], ("name".to_string(), "Joe's \"Best\" \\ 牛肉麵".to_string()));
    }

    #[test]
    fn control_characters_are_rejected() {
        let r = record(vec![("name", "bad\u{0007}bell")]);
        assert!(matches!(serialize_structured(&r), Err(CorpusError::Encoding(_))));
        let r = record(vec![("name", "tab\there")]);
        assert!(matches!(serialize_plain(&r), Err(CorpusError::Encoding(_))));
    }

    proptest! {
        #[test]
        fn structured_round_trip_is_idempotent(
            fields in proptest::collection::btree_map("[a-z_]{1,8}", "[^\\p{Cc}]{0,16}", 1..6)
        ) {
            let r = CorpusRecord {
                id: "x".into(),
                kind: Kind::Item,
                market: Market::Jpn,
                language: Language::Ja,
                fields: fields.clone().into_iter().rev().collect(),
                geo_cell: 3,
            };
            let s = serialize_structured(&r).unwrap();
            let parsed = parse_structured(&s).unwrap();
            prop_assert_eq!(&parsed, &fields.into_iter().collect::<Vec<_>>());
            let again = CorpusRecord { fields: parsed, ..r };
            prop_assert_eq!(serialize_structured(&again).unwrap(), s);
        }
    }
}
