use std::collections::HashSet;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::file::IndexArtifact;
use super::store::exact_knn;
use super::AnnError;

/// Minimum probe recall@k of the graph search against the exact oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guardrail {
    pub k: usize,
    pub ef_search: usize,
    pub min_recall: f64,
}

impl Default for Guardrail {
    fn default() -> Self {
        Self {
            k: 10,
            ef_search: 128,
            min_recall: 0.95,
        }
    }
}

/// Mean recall@k of unfiltered graph search against [`exact_knn`].
pub fn probe_recall(index: &IndexArtifact, probes: &[Vec<f32>], k: usize, ef: usize) -> Result<f64, AnnError> {
    if probes.is_empty() {
        return Err(AnnError::Argument("no probe queries".into()));
    }
    let mut total = 0.0;
    for q in probes {
        let exact: HashSet<u32> = exact_knn(&index.store, q, k, None)?.into_iter().map(|x| x.0).collect();
        let approx = index.graph.search(&index.store, q, k, ef, None)?;
        let hits = approx.iter().filter(|x| exact.contains(&x.0)).count();
        total += hits as f64 / exact.len().max(1) as f64;
    }
    Ok(total / probes.len() as f64)
}

struct Slots {
    active: Arc<IndexArtifact>,
    standby: Option<Arc<IndexArtifact>>,
}

/// Active/standby pair of index artifacts with atomic cutover.
///
/// Readers take an `Arc` to the active artifact and keep it for the whole
/// query, so a concurrent swap cannot mix two artifacts within one query.
pub struct IndexRegistry {
    slots: RwLock<Slots>,
}

impl IndexRegistry {
    pub fn new(initial: IndexArtifact) -> Self {
        Self {
            slots: RwLock::new(Slots {
                active: Arc::new(initial),
                standby: None,
            }),
        }
    }

    pub fn active(&self) -> Arc<IndexArtifact> {
        self.slots.read().expect("registry lock poisoned").active.clone()
    }

    pub fn standby(&self) -> Option<Arc<IndexArtifact>> {
        self.slots.read().expect("registry lock poisoned").standby.clone()
    }

    /// Validates `candidate` on `probes`, then makes it active and keeps the
    /// previous artifact as standby. On failure nothing changes.
    pub fn swap(&self, candidate: IndexArtifact, probes: &[Vec<f32>], guard: &Guardrail) -> Result<f64, AnnError> {
        let recall = probe_recall(&candidate, probes, guard.k, guard.ef_search)?;
        if recall < guard.min_recall {
            return Err(AnnError::Guardrail {
                recall,
                min: guard.min_recall,
            });
        }
        let candidate = Arc::new(candidate);
        let mut slots = self.slots.write().expect("registry lock poisoned");
        let old = std::mem::replace(&mut slots.active, candidate);
        slots.standby = Some(old);
        Ok(recall)
    }

    /// Reactivates the standby artifact.
    pub fn rollback(&self) -> Result<(), AnnError> {
        let mut slots = self.slots.write().expect("registry lock poisoned");
        let Some(standby) = slots.standby.take() else {
            return Err(AnnError::Argument("no standby artifact to roll back to".into()));
        };
        let old = std::mem::replace(&mut slots.active, standby);
        slots.standby = Some(old);
        Ok(())
    }
}
