use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::ann::{IndexArtifact, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub label: String,
    pub cut: usize,
    pub precision: Precision,
    pub vector_bytes: usize,
    pub graph_bytes: usize,
    pub total_bytes: usize,
    /// Vector payload relative to the baseline's.
    pub vector_ratio: f64,
    /// `cut · bytes_per_value / (baseline_cut · 4)`.
    pub closed_form_ratio: f64,
    pub total_ratio: f64,
}

/// Byte accounting of each index relative to `baseline`.
pub fn efficiency_report(
    indices: &[(&str, &IndexArtifact)],
    baseline: &IndexArtifact,
) -> Result<Vec<EfficiencyRow>, EvalError> {
    let base_vec = baseline.vector_bytes().len();
    let base_total = baseline.to_bytes()?.len();
    let base_cut = baseline.header.cut;
    if base_vec == 0 {
        return Err(EvalError::Contract("baseline index stores no vectors".into()));
    }
    indices
        .iter()
        .map(|&(label, idx)| {
            let vector_bytes = idx.vector_bytes().len();
            let total_bytes = idx.to_bytes()?.len();
            let h = &idx.header;
            Ok(EfficiencyRow {
                label: label.to_string(),
                cut: h.cut,
                precision: h.precision,
                vector_bytes,
                graph_bytes: idx.graph_bytes(),
                total_bytes,
                vector_ratio: vector_bytes as f64 / base_vec as f64,
                closed_form_ratio: (h.cut * h.precision.bytes_per_value()) as f64 / (base_cut * 4) as f64,
                total_ratio: total_bytes as f64 / base_total as f64,
            })
        })
        .collect()
}

impl EfficiencyRow {
    pub fn tsv_header() -> &'static str {
        "label\tcut\tprecision\tvector_bytes\tgraph_bytes\ttotal_bytes\tvector_ratio\tclosed_form\ttotal_ratio"
    }

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            self.label,
            self.cut,
            self.precision,
            self.vector_bytes,
            self.graph_bytes,
            self.total_bytes,
            self.vector_ratio,
            self.closed_form_ratio,
            self.total_ratio
        )
    }

    pub fn table(rows: &[EfficiencyRow]) -> String {
        let mut s = format!(
            "{:<16}{:>6}{:>10}{:>14}{:>14}{:>10}{:>10}{:>10}\n",
            "index", "cut", "precision", "vector bytes", "total bytes", "vec ×", "closed ×", "total ×"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "{:<16}{:>6}{:>10}{:>14}{:>14}{:>10.3}{:>10.3}{:>10.3}",
                r.label,
                r.cut,
                r.precision,
                r.vector_bytes,
                r.total_bytes,
                r.vector_ratio,
                r.closed_form_ratio,
                r.total_ratio
            );
        }
        s
    }
}

/// Wall-clock latency of unfiltered graph search, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub probes: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
}

/// Times one search per probe, cycling through `probes` until `count` searches ran.
pub fn measure_latency(
    index: &IndexArtifact,
    probes: &[Vec<f32>],
    count: usize,
    k: usize,
    ef: usize,
) -> Result<LatencyStats, EvalError> {
    if probes.is_empty() || count == 0 {
        return Err(EvalError::Contract("latency needs at least one probe".into()));
    }
    let mut us = Vec::with_capacity(count);
    for i in 0..count {
        let q = &probes[i % probes.len()];
        let t = Instant::now();
        let r = index.graph.search(&index.store, q, k, ef.max(k), None)?;
        us.push(t.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(r);
    }
    us.sort_by(f64::total_cmp);
    let pick = |p: f64| us[((us.len() - 1) as f64 * p).round() as usize];
    Ok(LatencyStats {
        probes: count,
        mean_us: us.iter().sum::<f64>() / count as f64,
        p50_us: pick(0.5),
        p95_us: pick(0.95),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{quantize_int8, HnswParams, VectorStore};
    use crate::autodiff::Tensor;
    use crate::towers::truncate_matrix;

    fn store(n: usize, m: usize) -> VectorStore {
        let data: Vec<f32> = (0..n * m).map(|i| ((i * 7919) % 113) as f32 / 113.0 - 0.5).collect();
        let mut t = Tensor::matrix(n, m, data).unwrap();
        for r in 0..n {
            let row = &mut t.data_mut()[r * m..(r + 1) * m];
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        VectorStore::fp32((0..n).map(|i| format!("d{i}")).collect(), &t).unwrap()
    }

    #[test]
    fn ratios_follow_closed_form() {
        let full = store(600, 96);
        let vecs = Tensor::matrix(
            600,
            96,
            match &full.payload {
                crate::ann::Payload::Fp32(v) => v.clone(),
                _ => unreachable!(),
            },
        )
        .unwrap();
        let cut = truncate_matrix(&vecs, 16, &[16, 96]).unwrap();
        let small = VectorStore::fp32(full.ids.clone(), &cut).unwrap();
        let small8 = quantize_int8(&small, &(0..600).collect::<Vec<_>>()).unwrap();
        let p = HnswParams::default();
        let base = IndexArtifact::build("tte-a", full, p).unwrap();
        let a = IndexArtifact::build("tte-a", small, p).unwrap();
        let b = IndexArtifact::build("tte-a", small8, p).unwrap();
        let rows = efficiency_report(&[("base", &base), ("cut16", &a), ("cut16-int8", &b)], &base).unwrap();
        assert_eq!(rows[0].vector_ratio, 1.0);
        assert_eq!(rows[0].total_ratio, 1.0);
        for r in &rows {
            assert!((r.vector_ratio / r.closed_form_ratio - 1.0).abs() < 0.02, "{r:?}");
        }
        assert!((rows[1].vector_ratio - 1.0 / 6.0).abs() < 1e-9);
        assert!(EfficiencyRow::table(&rows).lines().count() == 4);
        let lat = measure_latency(&a, &[vec![0.25; 16]], 50, 10, 32).unwrap();
        assert!(lat.p50_us <= lat.p95_us);
    }
}
