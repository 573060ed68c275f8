use std::path::Path;

use super::hnsw::{HnswIndex, HnswParams};
use super::store::{exact_knn, CandidateSet, Payload, Precision, VectorStore};
use super::AnnError;
use crate::container::{bytes_to_f32s, f32s_to_bytes, Container, ContainerError};

pub const INDEX_KIND: [u8; 4] = *b"INDX";
pub const INDEX_SCHEMA: u32 = 1;
/// Filtered queries over fewer eligible documents than this use an exact scan.
pub const EXACT_SCAN_LIMIT: usize = 2000;

const TTE_WIDTH: usize = 64;
const HEADER_LEN: usize = TTE_WIDTH + 4 + 1 + 1 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Dot product over unit-norm vectors.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexHeader {
    pub tte_id: String,
    pub cut: usize,
    pub precision: Precision,
    pub metric: Metric,
    pub hnsw: HnswParams,
    pub doc_count: usize,
}

impl IndexHeader {
    /// Fixed-width little-endian layout: tte id (64 bytes, NUL padded), cut
    /// u32, precision u8, metric u8, M u32, M0 u32, efConstruction u32, seed
    /// u64, doc count u64.
    fn encode(&self) -> Result<Vec<u8>, AnnError> {
        if self.tte_id.len() > TTE_WIDTH {
            return Err(AnnError::Argument(format!("tte id longer than {TTE_WIDTH} bytes")));
        }
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend_from_slice(self.tte_id.as_bytes());
        b.resize(TTE_WIDTH, 0);
        b.extend_from_slice(&(self.cut as u32).to_le_bytes());
        b.push(self.precision.code());
        b.push(0);
        b.extend_from_slice(&(self.hnsw.m as u32).to_le_bytes());
        b.extend_from_slice(&(self.hnsw.m0 as u32).to_le_bytes());
        b.extend_from_slice(&(self.hnsw.ef_construction as u32).to_le_bytes());
        b.extend_from_slice(&self.hnsw.seed.to_le_bytes());
        b.extend_from_slice(&(self.doc_count as u64).to_le_bytes());
        Ok(b)
    }

    fn decode(b: &[u8]) -> Result<Self, ContainerError> {
        let bad = |reason: &str| ContainerError::Malformed {
            name: "header".into(),
            reason: reason.into(),
        };
        if b.len() != HEADER_LEN {
            return Err(bad("wrong header length"));
        }
        let tte = &b[..TTE_WIDTH];
        let end = tte.iter().position(|&c| c == 0).unwrap_or(TTE_WIDTH);
        let tte_id = String::from_utf8(tte[..end].to_vec()).map_err(|_| bad("tte id is not UTF-8"))?;
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        let mut o = TTE_WIDTH;
        let cut = u32_at(o);
        o += 4;
        let precision = Precision::from_code(b[o]).ok_or_else(|| bad("unknown precision code"))?;
        o += 1;
        if b[o] != 0 {
            return Err(bad("unknown metric code"));
        }
        o += 1;
        let m = u32_at(o);
        let m0 = u32_at(o + 4);
        let ef_construction = u32_at(o + 8);
        let seed = u64_at(o + 12);
        let doc_count = u64_at(o + 20) as usize;
        Ok(Self {
            tte_id,
            cut,
            precision,
            metric: Metric::Cosine,
            hnsw: HnswParams {
                m,
                m0,
                ef_construction,
                seed,
            },
            doc_count,
        })
    }
}

/// A persisted index: header, id table, vectors and HNSW graph.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexArtifact {
    pub header: IndexHeader,
    pub store: VectorStore,
    pub graph: HnswIndex,
}

fn encode_ids(ids: &[String]) -> Vec<u8> {
    let mut b = Vec::new();
    for id in ids {
        b.extend_from_slice(&(id.len() as u32).to_le_bytes());
        b.extend_from_slice(id.as_bytes());
    }
    b
}

fn decode_ids(b: &[u8], n: usize) -> Result<Vec<String>, ContainerError> {
    let bad = |reason: &str| ContainerError::Malformed {
        name: "ids".into(),
        reason: reason.into(),
    };
    let mut ids = Vec::with_capacity(n);
    let mut o = 0;
    while o < b.len() {
        if b.len() - o < 4 {
            return Err(bad("truncated length"));
        }
        let len = u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize;
        o += 4;
        if b.len() - o < len {
            return Err(bad("truncated id"));
        }
        ids.push(String::from_utf8(b[o..o + len].to_vec()).map_err(|_| bad("id is not UTF-8"))?);
        o += len;
    }
    if ids.len() != n {
        return Err(bad("id count does not match header"));
    }
    Ok(ids)
}

impl IndexArtifact {
    pub fn build(tte_id: &str, store: VectorStore, params: HnswParams) -> Result<Self, AnnError> {
        let graph = HnswIndex::build(&store, params)?;
        Ok(Self {
            header: IndexHeader {
                tte_id: tte_id.to_string(),
                cut: store.dim,
                precision: store.precision(),
                metric: Metric::Cosine,
                hnsw: params,
                doc_count: store.len(),
            },
            store,
            graph,
        })
    }

    /// Top-`k` with eligibility pre-filtering: small candidate sets are
    /// scanned exactly, larger ones use filtered graph traversal.
    pub fn search(
        &self,
        q: &[f32],
        k: usize,
        ef: usize,
        filter: Option<&CandidateSet>,
    ) -> Result<Vec<(u32, f32)>, AnnError> {
        match filter {
            Some(f) if f.len() < EXACT_SCAN_LIMIT => exact_knn(&self.store, q, k, Some(f)),
            _ => self.graph.search(&self.store, q, k, ef.max(k), filter),
        }
    }

    pub fn vector_bytes(&self) -> Vec<u8> {
        match &self.store.payload {
            Payload::Fp32(v) => f32s_to_bytes(v),
            Payload::Int8 { codes, scales } => {
                let mut b = f32s_to_bytes(scales);
                b.extend(codes.iter().map(|&c| c as u8));
                b
            }
        }
    }

    pub fn graph_bytes(&self) -> usize {
        self.graph.encode().len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AnnError> {
        let mut c = Container::new(INDEX_KIND, INDEX_SCHEMA);
        c.push("header", self.header.encode()?);
        c.push("ids", encode_ids(&self.store.ids));
        c.push("vectors", self.vector_bytes());
        c.push("graph", self.graph.encode());
        Ok(c.encode())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AnnError> {
        let c = Container::decode(bytes, INDEX_KIND, INDEX_SCHEMA)?;
        let header = IndexHeader::decode(c.blob("header")?)?;
        let (n, m) = (header.doc_count, header.cut);
        let ids = decode_ids(c.blob("ids")?, n)?;
        let vb = c.blob("vectors")?;
        let payload = match header.precision {
            Precision::Fp32 => {
                let v = bytes_to_f32s("vectors", vb)?;
                if v.len() != n * m {
                    return Err(ContainerError::Malformed {
                        name: "vectors".into(),
                        reason: format!("{} values for {n}x{m}", v.len()),
                    }
                    .into());
                }
                Payload::Fp32(v)
            }
            Precision::Int8 => {
                if vb.len() != 4 * m + n * m {
                    return Err(ContainerError::Malformed {
                        name: "vectors".into(),
                        reason: format!("{} bytes for {n}x{m} int8", vb.len()),
                    }
                    .into());
                }
                let scales = bytes_to_f32s("vectors", &vb[..4 * m])?;
                let codes = vb[4 * m..].iter().map(|&c| c as i8).collect();
                Payload::Int8 { codes, scales }
            }
        };
        let graph = HnswIndex::decode(c.blob("graph")?, header.hnsw)?;
        if graph.len() != n {
            return Err(AnnError::Container(ContainerError::Malformed {
                name: "graph".into(),
                reason: format!("{} nodes for {n} documents", graph.len()),
            }));
        }
        Ok(Self {
            store: VectorStore { ids, dim: m, payload },
            header,
            graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnError> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AnnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
