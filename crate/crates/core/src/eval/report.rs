use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::ann::Precision;
use crate::corpus::{Market, Vertical};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub tte_id: String,
    pub cut: usize,
    pub precision: Precision,
    pub ef_search: usize,
    /// Candidate pool multiplier when results were re-ranked.
    pub rerank_expansion: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecall {
    pub query_id: String,
    pub market: Market,
    pub vertical: Vertical,
    /// Aligned with the report's k list.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecall {
    pub market: Market,
    pub vertical: Vertical,
    pub queries: usize,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub ks: Vec<usize>,
    pub cells: Vec<CellRecall>,
    pub overall: Vec<f64>,
    pub evaluated: usize,
    pub excluded: usize,
    pub per_query: Vec<QueryRecall>,
}

impl EvalReport {
    /// Single-pass reduction of per-query recalls into cell and overall means.
    pub fn assemble(meta: ReportMeta, ks: Vec<usize>, per_query: Vec<QueryRecall>, excluded: usize) -> Self {
        let nk = ks.len();
        let mut acc: BTreeMap<(Market, Vertical), (usize, Vec<f64>)> = BTreeMap::new();
        let mut total = vec![0.0; nk];
        for q in &per_query {
            let e = acc.entry((q.market, q.vertical)).or_insert_with(|| (0, vec![0.0; nk]));
            e.0 += 1;
            for (i, r) in q.recall.iter().enumerate() {
                e.1[i] += r;
                total[i] += r;
            }
        }
        let cells = acc
            .into_iter()
            .map(|((market, vertical), (n, sums))| CellRecall {
                market,
                vertical,
                queries: n,
                recall: sums.iter().map(|s| s / n as f64).collect(),
            })
            .collect();
        let n = per_query.len().max(1) as f64;
        Self {
            meta,
            ks,
            cells,
            overall: total.iter().map(|s| s / n).collect(),
            evaluated: per_query.len(),
            excluded,
            per_query,
        }
    }

    pub fn cell(&self, market: Market, vertical: Vertical) -> Option<&CellRecall> {
        self.cells.iter().find(|c| c.market == market && c.vertical == vertical)
    }

    /// Overall mean recall at `k`, if `k` was evaluated.
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.overall[i])
    }

    pub fn coverage_line(&self) -> String {
        format!(
            "coverage: {} queries evaluated, {} excluded without eligible positives",
            self.evaluated, self.excluded
        )
    }

    /// Aligned plain-text table, one row per (market, vertical) cell.
    pub fn table(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let rerank = m.rerank_expansion.map_or(String::new(), |e| format!(" rerank={e}x"));
        let _ = writeln!(
            s,
            "{}  tte={} cut={} precision={} ef={}{}",
            m.label, m.tte_id, m.cut, m.precision, m.ef_search, rerank
        );
        let _ = write!(s, "{:<8}{:<8}{:>8}", "market", "vertical", "queries");
        for k in &self.ks {
            let _ = write!(s, "{:>10}", format!("R@{k}"));
        }
        s.push('\n');
        let mut row = |market: &str, vertical: &str, n: usize, r: &[f64]| {
            let _ = write!(s, "{market:<8}{vertical:<8}{n:>8}");
            for v in r {
                let _ = write!(s, "{v:>10.4}");
            }
            s.push('\n');
        };
        for c in &self.cells {
            row(c.market.code(), c.vertical.code(), c.queries, &c.recall);
        }
        row("all", "all", self.evaluated, &self.overall);
        s.push_str(&self.coverage_line());
        s.push('\n');
        s
    }

    /// Tab-separated rows with a header line; the coverage line is a comment.
    pub fn tsv(&self) -> String {
        let m = &self.meta;
        let mut s = String::from("label\ttte_id\tcut\tprecision\tef_search\trerank\tmarket\tvertical\tqueries");
        for k in &self.ks {
            let _ = write!(s, "\tR@{k}");
        }
        s.push('\n');
        let rerank = m.rerank_expansion.map_or("-".to_string(), |e| e.to_string());
        let mut row = |market: &str, vertical: &str, n: usize, r: &[f64]| {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{market}\t{vertical}\t{n}",
                m.label, m.tte_id, m.cut, m.precision, m.ef_search, rerank
            );
            for v in r {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        };
        for c in &self.cells {
            row(c.market.code(), c.vertical.code(), c.queries, &c.recall);
        }
        row("all", "all", self.evaluated, &self.overall);
        let _ = writeln!(s, "# {}", self.coverage_line());
        s
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn meta() -> ReportMeta {
        ReportMeta {
            label: "x".into(),
            tte_id: "tte-1".into(),
            cut: 16,
            precision: Precision::Int8,
            ef_search: 64,
            rerank_expansion: None,
        }
    }

    fn arb_query() -> impl Strategy<Value = QueryRecall> {
        (0usize..3, 0usize..3, proptest::collection::vec(0.0f64..=1.0, 2)).prop_map(|(m, v, r)| QueryRecall {
            query_id: String::new(),
            market: Market::ALL[m],
            vertical: Vertical::ALL[v],
            recall: r,
        })
    }

    proptest! {
        #[test]
        fn cell_means_match_batch_mean(qs in proptest::collection::vec(arb_query(), 1..60)) {
            let rep = EvalReport::assemble(meta(), vec![20, 200], qs.clone(), 0);
            for c in &rep.cells {
                let members: Vec<&QueryRecall> =
                    qs.iter().filter(|q| q.market == c.market && q.vertical == c.vertical).collect();
                prop_assert_eq!(members.len(), c.queries);
                for i in 0..2 {
                    let batch = members.iter().map(|q| q.recall[i]).sum::<f64>() / members.len() as f64;
                    prop_assert!((batch - c.recall[i]).abs() < 1e-12);
                }
            }
            prop_assert_eq!(rep.cells.iter().map(|c| c.queries).sum::<usize>(), qs.len());
        }
    }

    #[test]
    fn table_and_tsv_shapes() {
        let qs = vec![
            QueryRecall {
                query_id: "q1".into(),
                market: Market::Usa,
                vertical: Vertical::Dish,
                recall: vec![0.25, 1.0],
            },
            QueryRecall {
                query_id: "q2".into(),
                market: Market::Jpn,
                vertical: Vertical::Store,
                recall: vec![0.5, 0.5],
            },
        ];
        let rep = EvalReport::assemble(meta(), vec![20, 200], qs, 3);
        let tsv = rep.tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().take(4).all(|l| l.split('\t').count() == 11));
        assert!(lines[4].contains("3 excluded"));
        let table = rep.table();
        assert!(table.contains("R@200"));
        assert!(table.contains("0.3750"));
        assert_eq!(rep.recall(200), Some(0.75));
        assert_eq!(rep.recall(7), None);
    }
}
