use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{rank_order, CandidateSet, VectorStore};
use super::AnnError;
use crate::container::ContainerError;
use crate::seed;

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Max out-degree on upper layers.
    pub m: usize,
    /// Max out-degree on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            m0: 32,
            ef_construction: 200,
            seed: 0x686e_7377,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f32,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    /// Greater means better: higher score, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Layered proximity graph over the rows of a [`VectorStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub params: HnswParams,
    entry: Option<u32>,
    max_level: usize,
    /// `links[node][level]` lists neighbor ids.
    links: Vec<Vec<Vec<u32>>>,
}

struct Vectors {
    data: Vec<f32>,
    dim: usize,
}

impl Vectors {
    fn row(&self, i: u32) -> &[f32] {
        let i = i as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn sim(&self, a: u32, b: u32) -> f32 {
        self.row(a).iter().zip(self.row(b)).map(|(x, y)| x * y).sum()
    }

    fn sim_q(&self, a: u32, q: &[f32]) -> f32 {
        self.row(a).iter().zip(q).map(|(x, y)| x * y).sum()
    }
}

trait Scorer {
    fn score(&self, id: u32, q: &[f32]) -> f32;
}

impl Scorer for Vectors {
    fn score(&self, id: u32, q: &[f32]) -> f32 {
        self.sim_q(id, q)
    }
}

impl Scorer for VectorStore {
    fn score(&self, id: u32, q: &[f32]) -> f32 {
        self.dot(id as usize, q)
    }
}

impl HnswIndex {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn neighbors(&self, node: u32, level: usize) -> &[u32] {
        self.links[node as usize].get(level).map_or(&[], Vec::as_slice)
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m0
        } else {
            self.params.m
        }
    }

    /// Inserts every row of `store` in index order.
    pub fn build(store: &VectorStore, params: HnswParams) -> Result<Self, AnnError> {
        if params.m < 2 || params.m0 < params.m || params.ef_construction == 0 {
            return Err(AnnError::Argument(format!("invalid HNSW parameters {params:?}")));
        }
        if store.is_empty() {
            return Err(AnnError::Argument("cannot build an index over zero vectors".into()));
        }
        let mut data = Vec::with_capacity(store.len() * store.dim);
        for i in 0..store.len() {
            data.extend_from_slice(&store.vector(i));
        }
        let vecs = Vectors { data, dim: store.dim };
        let mut rng = seed::rng(params.seed, &[0x6c76_6c73]);
        let ml = 1.0 / (params.m as f64).ln();
        let mut index = Self {
            params,
            entry: None,
            max_level: 0,
            links: Vec::with_capacity(store.len()),
        };
        let mut visited = vec![0u32; store.len()];
        let mut epoch = 0u32;
        for i in 0..store.len() as u32 {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL);
            index.links.push(vec![Vec::new(); level + 1]);
            index.insert(&vecs, i, level, &mut visited, &mut epoch);
        }
        index.repair_connectivity(&vecs);
        Ok(index)
    }

    fn insert(&mut self, vecs: &Vectors, i: u32, level: usize, visited: &mut [u32], epoch: &mut u32) {
        let Some(mut ep) = self.entry else {
            self.entry = Some(i);
            self.max_level = level;
            return;
        };
        let q = vecs.row(i).to_vec();
        for lev in (level + 1..=self.max_level).rev() {
            ep = self.greedy(vecs, &q, ep, lev);
        }
        let mut eps = vec![ep];
        for lev in (0..=level.min(self.max_level)).rev() {
            *epoch += 1;
            let found = self.search_layer(vecs, &q, &eps, self.params.ef_construction, lev, None, visited, *epoch);
            let chosen = select_neighbors(vecs, &found, self.max_degree(lev));
            self.links[i as usize][lev] = chosen.clone();
            for &n in &chosen {
                let max = self.max_degree(lev);
                let list = &mut self.links[n as usize][lev];
                list.push(i);
                if list.len() > max {
                    let mut cands: Vec<Scored> = list
                        .iter()
                        .map(|&c| Scored {
                            score: vecs.sim(n, c),
                            id: c,
                        })
                        .collect();
                    cands.sort_by(|a, b| b.cmp(a));
                    *list = select_neighbors(vecs, &cands, max);
                }
            }
            eps = found.iter().map(|s| s.id).collect();
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(i);
        }
    }

    fn greedy<S: Scorer + ?Sized>(&self, s: &S, q: &[f32], mut ep: u32, level: usize) -> u32 {
        let mut best = s.score(ep, q);
        loop {
            let mut moved = false;
            for &n in self.neighbors(ep, level) {
                let sc = s.score(n, q);
                if sc > best || (sc == best && n < ep) {
                    best = sc;
                    ep = n;
                    moved = true;
                }
            }
            if !moved {
                return ep;
            }
        }
    }

    /// Best-first search on one layer; results sorted best first. With a
    /// filter, traversal crosses ineligible nodes but never returns them.
    #[allow(clippy::too_many_arguments)]
    fn search_layer<S: Scorer + ?Sized>(
        &self,
        s: &S,
        q: &[f32],
        eps: &[u32],
        ef: usize,
        level: usize,
        filter: Option<&CandidateSet>,
        visited: &mut [u32],
        epoch: u32,
    ) -> Vec<Scored> {
        let admit = |id: u32| filter.is_none_or(|f| f.contains(id));
        let mut cands: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in eps {
            if visited[e as usize] == epoch {
                continue;
            }
            visited[e as usize] = epoch;
            let sc = Scored {
                score: s.score(e, q),
                id: e,
            };
            cands.push(sc);
            if admit(e) {
                results.push(Reverse(sc));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = cands.pop() {
            if results.len() >= ef {
                let worst = results.peek().expect("non-empty").0;
                if c < worst {
                    break;
                }
            }
            for &n in self.neighbors(c.id, level) {
                if visited[n as usize] == epoch {
                    continue;
                }
                visited[n as usize] = epoch;
                let sc = Scored {
                    score: s.score(n, q),
                    id: n,
                };
                let full = results.len() >= ef;
                if !full || sc > results.peek().expect("non-empty").0 {
                    cands.push(sc);
                    if admit(n) {
                        results.push(Reverse(sc));
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Links any node unreachable from the entry point on layer 0 to its
    /// nearest reachable node, so layer 0 is connected.
    fn repair_connectivity(&mut self, vecs: &Vectors) {
        let n = self.links.len();
        let Some(entry) = self.entry else { return };
        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([entry]);
        reached[entry as usize] = true;
        let bfs = |links: &Vec<Vec<Vec<u32>>>, reached: &mut Vec<bool>, queue: &mut VecDeque<u32>| {
            while let Some(u) = queue.pop_front() {
                for &v in &links[u as usize][0] {
                    if !reached[v as usize] {
                        reached[v as usize] = true;
                        queue.push_back(v);
                    }
                }
            }
        };
        bfs(&self.links, &mut reached, &mut queue);
        for u in 0..n as u32 {
            if reached[u as usize] {
                continue;
            }
            let nearest = (0..n as u32)
                .filter(|&v| reached[v as usize])
                .map(|v| Scored {
                    score: vecs.sim(u, v),
                    id: v,
                })
                .max()
                .expect("entry is reached");
            self.links[nearest.id as usize][0].push(u);
            if !self.links[u as usize][0].contains(&nearest.id) {
                self.links[u as usize][0].push(nearest.id);
            }
            reached[u as usize] = true;
            queue.push_back(u);
            bfs(&self.links, &mut reached, &mut queue);
        }
    }

    /// Nodes reachable from the entry point on layer 0.
    pub fn reachable_from_entry(&self) -> usize {
        let Some(entry) = self.entry else { return 0 };
        let mut seen = vec![false; self.links.len()];
        let mut queue = VecDeque::from([entry]);
        seen[entry as usize] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u, 0) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count
    }

    /// Approximate top-`k` by dot product with `ef` candidates on layer 0.
    pub fn search(
        &self,
        store: &VectorStore,
        q: &[f32],
        k: usize,
        ef: usize,
        filter: Option<&CandidateSet>,
    ) -> Result<Vec<(u32, f32)>, AnnError> {
        if k == 0 {
            return Err(AnnError::Argument("k must be positive".into()));
        }
        if ef < k {
            return Err(AnnError::Argument(format!("efSearch {ef} < k {k}")));
        }
        if q.len() != store.dim {
            return Err(AnnError::Argument(format!(
                "query has {} dims, store {}",
                q.len(),
                store.dim
            )));
        }
        if store.len() != self.len() {
            return Err(AnnError::Argument(format!(
                "store has {} rows, graph {}",
                store.len(),
                self.len()
            )));
        }
        let Some(mut ep) = self.entry else {
            return Ok(Vec::new());
        };
        for lev in (1..=self.max_level).rev() {
            ep = self.greedy(store, q, ep, lev);
        }
        let mut visited = vec![0u32; self.len()];
        let found = self.search_layer(store, q, &[ep], ef, 0, filter, &mut visited, 1);
        let mut out: Vec<(u32, f32)> = found.into_iter().map(|s| (s.id, s.score)).collect();
        out.sort_by(rank_order);
        out.truncate(k);
        Ok(out)
    }

    /// `entry u32 (u32::MAX if none) | max_level u32 | node count u32`, then
    /// per node `level count u32` and per level `degree u32 | ids u32...`.
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.entry.unwrap_or(u32::MAX).to_le_bytes());
        b.extend_from_slice(&(self.max_level as u32).to_le_bytes());
        b.extend_from_slice(&(self.links.len() as u32).to_le_bytes());
        for node in &self.links {
            b.extend_from_slice(&(node.len() as u32).to_le_bytes());
            for level in node {
                b.extend_from_slice(&(level.len() as u32).to_le_bytes());
                for &id in level {
                    b.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn decode(bytes: &[u8], params: HnswParams) -> Result<Self, ContainerError> {
        let bad = |reason: &str| ContainerError::Malformed {
            name: "graph".into(),
            reason: reason.to_string(),
        };
        let mut words = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")));
        if !bytes.len().is_multiple_of(4) {
            return Err(bad("length not a multiple of 4"));
        }
        let mut next = || words.next().ok_or_else(|| bad("truncated"));
        let entry = next()?;
        let max_level = next()? as usize;
        let n = next()? as usize;
        let mut links = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let levels = next()? as usize;
            if levels == 0 || levels > MAX_LEVEL + 1 {
                return Err(bad("node level out of range"));
            }
            let mut node = Vec::with_capacity(levels);
            for _ in 0..levels {
                let deg = next()? as usize;
                let mut l = Vec::with_capacity(deg.min(1024));
                for _ in 0..deg {
                    let id = next()?;
                    if id as usize >= n {
                        return Err(bad("neighbor id out of range"));
                    }
                    l.push(id);
                }
                node.push(l);
            }
            links.push(node);
        }
        if next().is_ok() {
            return Err(bad("trailing data"));
        }
        let entry = if entry == u32::MAX { None } else { Some(entry) };
        if entry.is_some_and(|e| e as usize >= n) || (entry.is_none() && n > 0) {
            return Err(bad("entry point out of range"));
        }
        Ok(Self {
            params,
            entry,
            max_level,
            links,
        })
    }
}

/// Diversity heuristic: keep a candidate only if it is closer to the base
/// than to every neighbor already kept; top up with pruned candidates.
fn select_neighbors(vecs: &Vectors, cands: &[Scored], m: usize) -> Vec<u32> {
    let mut kept: Vec<Scored> = Vec::with_capacity(m);
    let mut pruned = Vec::new();
    for &c in cands {
        if kept.len() == m {
            break;
        }
        if kept.iter().all(|k| vecs.sim(c.id, k.id) < c.score) {
            kept.push(c);
        } else {
            pruned.push(c);
        }
    }
    for p in pruned {
        if kept.len() == m {
            break;
        }
        kept.push(p);
    }
    kept.into_iter().map(|s| s.id).collect()
}
