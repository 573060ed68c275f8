use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, CorpusRecord, CorpusSpec, Kind, Language, Latent, Market, TrainingRow, Vertical};

pub const CORPUS_SCHEMA: &str = "tandem.corpus/1";
pub const INTERACTIONS_SCHEMA: &str = "tandem.interactions/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CorpusSpec>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    kind: Kind,
    market: Market,
    language: Language,
    geo_cell: u32,
    vertical: Vertical,
    topic: u32,
    held_out: bool,
    fields: BTreeMap<String, String>,
}

fn json_err(line: usize) -> impl Fn(serde_json::Error) -> CorpusError {
    move |e| CorpusError::Format(format!("line {line}: {e}"))
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), CorpusError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| CorpusError::Encoding(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_header<R: BufRead>(lines: &mut std::io::Lines<R>, schema: &str) -> Result<FileHeader, CorpusError> {
    let first = lines
        .next()
        .ok_or_else(|| CorpusError::Format("empty file, missing header".into()))??;
    let header: FileHeader = serde_json::from_str(&first).map_err(json_err(1))?;
    if header.schema != schema {
        return Err(CorpusError::Format(format!(
            "schema `{}` where `{schema}` was expected",
            header.schema
        )));
    }
    Ok(header)
}

/// One header line, then one line per record with its latent assignment and
/// canonical field object.
pub fn write_corpus<W: Write>(w: &mut W, spec: &CorpusSpec, corpus: &Corpus) -> Result<(), CorpusError> {
    write_line(
        w,
        &FileHeader {
            schema: CORPUS_SCHEMA.into(),
            seed: spec.seed,
            spec: Some(spec.clone()),
        },
    )?;
    for (r, l) in corpus.records().iter().zip(corpus.latents()) {
        let mut fields = BTreeMap::new();
        for (k, v) in &r.fields {
            if v.chars().chain(k.chars()).any(char::is_control) {
                return Err(CorpusError::Encoding(format!("control character in record `{}`", r.id)));
            }
            fields.insert(k.clone(), v.clone());
        }
        write_line(
            w,
            &RecordLine {
                id: r.id.clone(),
                kind: r.kind,
                market: r.market,
                language: r.language,
                geo_cell: r.geo_cell,
                vertical: l.vertical,
                topic: l.topic,
                held_out: l.held_out,
                fields,
            },
        )?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<(FileHeader, Corpus), CorpusError> {
    let mut lines = r.lines();
    let header = read_header(&mut lines, CORPUS_SCHEMA)?;
    let mut records = Vec::new();
    let mut latents = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(json_err(i + 2))?;
        records.push(CorpusRecord {
            id: rec.id,
            kind: rec.kind,
            market: rec.market,
            language: rec.language,
            fields: rec.fields.into_iter().collect(),
            geo_cell: rec.geo_cell,
        });
        latents.push(Latent {
            vertical: rec.vertical,
            topic: rec.topic,
            held_out: rec.held_out,
        });
    }
    Ok((header, Corpus::new(records, latents)?))
}

pub fn write_interactions<W: Write>(w: &mut W, seed: u64, rows: &[TrainingRow]) -> Result<(), CorpusError> {
    write_line(
        w,
        &FileHeader {
            schema: INTERACTIONS_SCHEMA.into(),
            seed,
            spec: None,
        },
    )?;
    for row in rows {
        write_line(w, row)?;
    }
    Ok(())
}

pub fn read_interactions<R: BufRead>(r: R) -> Result<(FileHeader, Vec<TrainingRow>), CorpusError> {
    let mut lines = r.lines();
    let header = read_header(&mut lines, INTERACTIONS_SCHEMA)?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row: TrainingRow = serde_json::from_str(&line).map_err(json_err(i + 2))?;
        row.validate()?;
        rows.push(row);
    }
    Ok((header, rows))
}
