use std::borrow::Cow;
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::AnnError;
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Int8,
}

impl Precision {
    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Int8 => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Int8 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Precision::Fp32),
            1 => Some(Precision::Int8),
            _ => None,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = AnnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "int8" => Ok(Precision::Int8),
            _ => Err(AnnError::Argument(format!("unknown precision `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fp32(Vec<f32>),
    /// Symmetric per-dimension codes; value = code * scale[d].
    Int8 {
        codes: Vec<i8>,
        scales: Vec<f32>,
    },
}

/// Embeddings of a document set at one cut and precision.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    pub ids: Vec<String>,
    pub dim: usize,
    pub payload: Payload,
}

impl VectorStore {
    pub fn fp32(ids: Vec<String>, vectors: &Tensor<f32>) -> Result<Self, AnnError> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(AnnError::Argument(format!(
                "{} ids for vectors of shape {:?}",
                ids.len(),
                vectors.shape()
            )));
        }
        Ok(Self {
            ids,
            dim: vectors.cols(),
            payload: Payload::Fp32(vectors.data().to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn precision(&self) -> Precision {
        match self.payload {
            Payload::Fp32(_) => Precision::Fp32,
            Payload::Int8 { .. } => Precision::Int8,
        }
    }

    /// Vector `i`, dequantized when stored as INT8.
    pub fn vector(&self, i: usize) -> Cow<'_, [f32]> {
        let m = self.dim;
        match &self.payload {
            Payload::Fp32(v) => Cow::Borrowed(&v[i * m..(i + 1) * m]),
            Payload::Int8 { codes, scales } => Cow::Owned(
                codes[i * m..(i + 1) * m]
                    .iter()
                    .zip(scales)
                    .map(|(&c, &s)| f32::from(c) * s)
                    .collect(),
            ),
        }
    }

    /// Dot product of stored vector `i` with `q`, in 32-bit after dequantization.
    pub fn dot(&self, i: usize, q: &[f32]) -> f32 {
        let m = self.dim;
        match &self.payload {
            Payload::Fp32(v) => v[i * m..(i + 1) * m].iter().zip(q).map(|(a, b)| a * b).sum(),
            Payload::Int8 { codes, scales } => codes[i * m..(i + 1) * m]
                .iter()
                .zip(scales)
                .zip(q)
                .map(|((&c, &s), &x)| f32::from(c) * s * x)
                .sum(),
        }
    }

    /// Bytes of vector data: `n·m·4` for FP32, `n·m + 4·m` for INT8.
    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            Payload::Fp32(v) => v.len() * 4,
            Payload::Int8 { codes, scales } => codes.len() + scales.len() * 4,
        }
    }
}

/// Per-dimension symmetric scales `max|v_d| / 127` over calibration rows
/// (rows of `store`); all-zero dimensions get scale 1.
pub fn int8_scales(store: &VectorStore, calibration: &[usize]) -> Result<Vec<f32>, AnnError> {
    if calibration.is_empty() {
        return Err(AnnError::Argument("calibration sample is empty".into()));
    }
    let mut maxabs = vec![0.0f32; store.dim];
    for &i in calibration {
        if i >= store.len() {
            return Err(AnnError::Argument(format!(
                "calibration row {i} outside store of {}",
                store.len()
            )));
        }
        for (m, v) in maxabs.iter_mut().zip(store.vector(i).iter()) {
            *m = m.max(v.abs());
        }
    }
    Ok(maxabs
        .into_iter()
        .map(|m| if m > 0.0 { m / 127.0 } else { 1.0 })
        .collect())
}

pub fn quantize_value(v: f32, scale: f32) -> i8 {
    (v / scale).round().clamp(-127.0, 127.0) as i8
}

/// INT8 copy of an FP32 store calibrated on the given rows.
pub fn quantize_int8(store: &VectorStore, calibration: &[usize]) -> Result<VectorStore, AnnError> {
    let Payload::Fp32(values) = &store.payload else {
        return Err(AnnError::Argument("store is already quantized".into()));
    };
    let scales = int8_scales(store, calibration)?;
    let m = store.dim;
    let codes = values
        .iter()
        .enumerate()
        .map(|(j, &v)| quantize_value(v, scales[j % m]))
        .collect();
    Ok(VectorStore {
        ids: store.ids.clone(),
        dim: m,
        payload: Payload::Int8 { codes, scales },
    })
}

/// Eligible subset of a store, kept both as a sorted list and as a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    members: Vec<u32>,
    mask: Vec<bool>,
}

impl CandidateSet {
    pub fn new(store_len: usize, mut members: Vec<u32>) -> Self {
        members.sort_unstable();
        members.dedup();
        members.retain(|&i| (i as usize) < store_len);
        let mut mask = vec![false; store_len];
        for &i in &members {
            mask[i as usize] = true;
        }
        Self { members, mask }
    }

    pub fn all(store_len: usize) -> Self {
        Self {
            members: (0..store_len as u32).collect(),
            mask: vec![true; store_len],
        }
    }

    pub fn members(&self) -> &[u32] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: u32) -> bool {
        self.mask.get(i as usize).copied().unwrap_or(false)
    }
}

/// Descending score, then ascending index.
pub fn rank_order(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top-`k` by dot product over `candidates` (all rows when `None`).
pub fn exact_knn(
    store: &VectorStore,
    q: &[f32],
    k: usize,
    candidates: Option<&CandidateSet>,
) -> Result<Vec<(u32, f32)>, AnnError> {
    if k == 0 {
        return Err(AnnError::Argument("k must be positive".into()));
    }
    if q.len() != store.dim {
        return Err(AnnError::Argument(format!(
            "query has {} dims, store {}",
            q.len(),
            store.dim
        )));
    }
    let mut scored: Vec<(u32, f32)> = match candidates {
        Some(c) => c.members().iter().map(|&i| (i, store.dot(i as usize, q))).collect(),
        None => (0..store.len() as u32).map(|i| (i, store.dot(i as usize, q))).collect(),
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::ann::tests::random_store;

    #[test]
    fn self_match_ranks_first() {
        let s = random_store(50, 16, 1);
        let q = s.vector(7).into_owned();
        let r = exact_knn(&s, &q, 5, None).unwrap();
        assert_eq!(r[0].0, 7);
        assert!((r[0].1 - 1.0).abs() < 1e-6);
        assert_eq!(exact_knn(&s, &q, 500, None).unwrap().len(), 50);
        assert!(exact_knn(&s, &q, 0, None).is_err());
    }

    #[test]
    fn empty_candidate_set_gives_empty_result() {
        let s = random_store(10, 4, 2);
        let c = CandidateSet::new(10, vec![]);
        assert!(exact_knn(&s, &[1.0, 0.0, 0.0, 0.0], 3, Some(&c)).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_lowest_index() {
        let t = Tensor::matrix(3, 2, vec![1.0f32, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = VectorStore::fp32(vec!["a".into(), "b".into(), "c".into()], &t).unwrap();
        let r = exact_knn(&s, &[1.0, 0.0], 1, None).unwrap();
        assert_eq!(r, vec![(0, 1.0)]);
    }

    #[test]
    fn zero_vector_quantizes_to_zero_and_zero_dims_get_unit_scale() {
        let t = Tensor::matrix(2, 3, vec![0.0f32, 0.5, 0.0, 0.0, -0.25, 0.0]).unwrap();
        let s = VectorStore::fp32(vec!["a".into(), "b".into()], &t).unwrap();
        let z = VectorStore::fp32(vec!["z".into()], &Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        let q = quantize_int8(&s, &[0, 1]).unwrap();
        let Payload::Int8 { scales, .. } = &q.payload else {
            unreachable!()
        };
        assert_eq!(scales[0], 1.0);
        assert_eq!(scales[2], 1.0);
        assert_eq!(scales[1], 0.5 / 127.0);
        let qz = quantize_int8(&z, &[0]).unwrap();
        assert!(qz.vector(0).iter().all(|&v| v == 0.0));
        assert!(quantize_int8(&s, &[]).is_err());
    }

    #[test]
    fn payload_is_one_byte_per_value_plus_scales() {
        let s = random_store(100, 32, 3);
        assert_eq!(s.payload_bytes(), 100 * 32 * 4);
        let q = quantize_int8(&s, &(0..100).collect::<Vec<_>>()).unwrap();
        assert_eq!(q.payload_bytes(), 100 * 32 + 32 * 4);
    }

    fn naive(store: &VectorStore, q: &[f32], k: usize) -> Vec<(u32, f32)> {
        let mut all: Vec<(u32, f32)> = (0..store.len())
            .map(|i| {
                let v = store.vector(i);
                let mut s = 0.0f32;
                for d in 0..store.dim {
                    s += v[d] * q[d];
                }
                (i as u32, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_linear_scan_on_1k_vectors() {
        let s = random_store(1000, 32, 4);
        let probes = random_store(20, 32, 5);
        for p in 0..probes.len() {
            let q = probes.vector(p);
            for k in [1, 20, 200] {
                assert_eq!(exact_knn(&s, &q, k, None).unwrap(), naive(&s, &q, k));
            }
        }
    }

    proptest! {
        #[test]
        fn reconstruction_error_within_half_scale(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f32..2.0, 8), 1..20)
        ) {
            let n = rows.len();
            let t = Tensor::matrix(n, 8, rows.concat()).unwrap();
            let s = VectorStore::fp32((0..n).map(|i| i.to_string()).collect(), &t).unwrap();
            let cal: Vec<usize> = (0..n).collect();
            let q = quantize_int8(&s, &cal).unwrap();
            let Payload::Int8 { scales, .. } = &q.payload else { unreachable!() };
            for i in 0..n {
                let orig = s.vector(i);
                for (d, r) in q.vector(i).iter().enumerate() {
                    prop_assert!((r - orig[d]).abs() <= scales[d] / 2.0 * (1.0 + 1e-5));
                }
            }
        }
    }
}
