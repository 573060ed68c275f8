use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{Corpus, Language, TrainingRow, Vertical};
use crate::seed;

/// Maximum number of rows kept per (query language, query vertical). Groups
/// without an entry are uncapped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupCaps {
    pub caps: BTreeMap<(Language, Vertical), usize>,
}

impl GroupCaps {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn set(&mut self, lang: Language, v: Vertical, cap: usize) {
        self.caps.insert((lang, v), cap);
    }

    pub fn get(&self, lang: Language, v: Vertical) -> Option<usize> {
        self.caps.get(&(lang, v)).copied()
    }
}

fn group_of(corpus: &Corpus, row: &TrainingRow) -> Option<(Language, Vertical)> {
    let rec = corpus.get(&row.query_id)?;
    let lat = corpus.latent(&row.query_id)?;
    Some((rec.language, lat.vertical))
}

/// Caps that equalize row counts across verticals within each language: the
/// cap for every vertical is the smallest vertical count in that language.
pub fn balancing_caps(corpus: &Corpus, interactions: &[TrainingRow]) -> GroupCaps {
    let mut counts: BTreeMap<(Language, Vertical), usize> = BTreeMap::new();
    for row in interactions {
        if let Some(g) = group_of(corpus, row) {
            *counts.entry(g).or_default() += 1;
        }
    }
    let mut per_lang: BTreeMap<Language, Vec<Vertical>> = BTreeMap::new();
    for &(l, v) in counts.keys() {
        per_lang.entry(l).or_default().push(v);
    }
    let verticals: Vec<Vertical> = {
        let mut vs: Vec<Vertical> = counts.keys().map(|&(_, v)| v).collect();
        vs.sort_unstable();
        vs.dedup();
        vs
    };
    let mut caps = GroupCaps::default();
    for l in per_lang.keys() {
        let min = verticals
            .iter()
            .map(|&v| counts.get(&(*l, v)).copied().unwrap_or(0))
            .min()
            .unwrap_or(0);
        for &v in &verticals {
            caps.set(*l, v, min);
        }
    }
    caps
}

/// Seeded downsampling to per-group caps. Kept rows stay in input order.
pub fn rebalance(corpus: &Corpus, interactions: &[TrainingRow], caps: &GroupCaps, seed_value: u64) -> Vec<TrainingRow> {
    let mut groups: BTreeMap<(Language, Vertical), Vec<usize>> = BTreeMap::new();
    let mut keep = vec![true; interactions.len()];
    for (i, row) in interactions.iter().enumerate() {
        if let Some(g) = group_of(corpus, row) {
            groups.entry(g).or_default().push(i);
        }
    }
    for ((l, v), members) in groups {
        let Some(cap) = caps.get(l, v) else { continue };
        if members.len() <= cap {
            continue;
        }
        let mut order = members.clone();
        let mut rng = seed::rng(seed_value, &[0x7265_6261, l as u64, v as u64]);
        order.shuffle(&mut rng);
        for &i in &order[cap..] {
            keep[i] = false;
        }
    }
    interactions
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect()
}
