//! Binary container shared by model artifacts, checkpoints and index files.
//!
//! Layout (all integers little-endian):
//! `magic "TNDM" | kind [u8; 4] | schema version u32 | blob count u32`, then per
//! blob `name len u16 | name | payload len u64 | payload | fnv-1a-64 u64` where
//! the checksum covers name and payload.

use std::hash::Hasher;

use fnv::FnvHasher;

pub const MAGIC: [u8; 4] = *b"TNDM";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("not a tandem file (bad magic)")]
    BadMagic,
    #[error("file holds a `{found}` container where `{expected}` was expected")]
    WrongKind { found: String, expected: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch in blob `{0}`")]
    Checksum(String),
    #[error("missing blob `{0}`")]
    Missing(String),
    #[error("malformed blob `{name}`: {reason}")]
    Malformed { name: String, reason: String },
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Stable identifier derived from content, e.g. `qm-1f2e...`.
pub fn content_id(prefix: &str, bytes: &[u8]) -> String {
    format!("{prefix}-{:016x}", fnv64(bytes))
}

fn blob_checksum(name: &str, payload: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    h.write(payload);
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: [u8; 4],
    pub version: u32,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new(kind: [u8; 4], version: u32) -> Self {
        Self {
            kind,
            version,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.blobs.push((name.into(), payload));
    }

    pub fn blob(&self, name: &str) -> Result<&[u8], ContainerError> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let total: usize = self.blobs.iter().map(|(n, b)| n.len() + b.len() + 18).sum();
        let mut out = Vec::with_capacity(16 + total);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, payload) in &self.blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&blob_checksum(name, payload).to_le_bytes());
        }
        out
    }

    /// Parses and verifies every checksum; nothing is returned on any failure.
    pub fn decode(bytes: &[u8], kind: [u8; 4], version: u32) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let found_kind: [u8; 4] = r.take(4, "kind")?.try_into().expect("4 bytes");
        if found_kind != kind {
            return Err(ContainerError::WrongKind {
                found: String::from_utf8_lossy(&found_kind).into_owned(),
                expected: String::from_utf8_lossy(&kind).into_owned(),
            });
        }
        let found_version = r.u32("version")?;
        if found_version != version {
            return Err(ContainerError::Version {
                found: found_version,
                expected: version,
            });
        }
        let count = r.u32("blob count")?;
        let mut blobs = Vec::with_capacity(count.min(1024) as usize);
        for i in 0..count {
            let what = format!("blob {i} header");
            let name_len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len, &what)?.to_vec()).map_err(|_| ContainerError::Malformed {
                name: format!("#{i}"),
                reason: "name is not UTF-8".into(),
            })?;
            let len = r.u64(&name)?;
            let len = usize::try_from(len).map_err(|_| ContainerError::Truncated(name.clone()))?;
            let payload = r.take(len, &name)?.to_vec();
            let sum = r.u64(&name)?;
            if sum != blob_checksum(&name, &payload) {
                return Err(ContainerError::Checksum(name));
            }
            blobs.push((name, payload));
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Malformed {
                name: "<trailer>".into(),
                reason: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { kind, version, blobs })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn f32s_to_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(name: &str, b: &[u8]) -> Result<Vec<f32>, ContainerError> {
    if !b.len().is_multiple_of(4) {
        return Err(ContainerError::Malformed {
            name: name.to_string(),
            reason: format!("{} bytes is not a whole number of f32", b.len()),
        });
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn u32s_to_bytes(xs: &[u32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_u32s(name: &str, b: &[u8]) -> Result<Vec<u32>, ContainerError> {
    if !b.len().is_multiple_of(4) {
        return Err(ContainerError::Malformed {
            name: name.to_string(),
            reason: format!("{} bytes is not a whole number of u32", b.len()),
        });
    }
    Ok(b.chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
