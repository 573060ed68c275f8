use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Start {
        run_id: String,
        config: TrainConfig,
        data_fingerprint: String,
        init_tte_id: String,
    },
    Loss {
        step: usize,
        loss: f64,
    },
    Hit {
        step: usize,
        k: usize,
        value: f64,
    },
    Checkpoint {
        step: usize,
        file: String,
    },
    Artifact {
        tte_id: String,
        query_model_id: String,
        doc_model_id: String,
    },
    Abort {
        step: usize,
        reason: String,
    },
}

/// Append-only event log of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    events: Vec<RunEvent>,
}

impl RunRecord {
    pub fn new(start: RunEvent) -> Self {
        Self { events: vec![start] }
    }

    pub fn push(&mut self, e: RunEvent) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[RunEvent] {
        &self.events
    }

    pub fn run_id(&self) -> &str {
        match &self.events[0] {
            RunEvent::Start { run_id, .. } => run_id,
            _ => unreachable!("records always open with a start event"),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        match &self.events[0] {
            RunEvent::Start { config, .. } => config,
            _ => unreachable!("records always open with a start event"),
        }
    }

    /// `(step, loss)` for every optimizer step, 1-based.
    pub fn losses(&self) -> Vec<(usize, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                RunEvent::Loss { step, loss } => Some((*step, *loss)),
                _ => None,
            })
            .collect()
    }

    pub fn hits(&self) -> Vec<(usize, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                RunEvent::Hit { step, value, .. } => Some((*step, *value)),
                _ => None,
            })
            .collect()
    }

    /// Mean loss over consecutive windows of `steps_per_epoch` steps.
    pub fn epoch_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        let l: Vec<f64> = self.losses().into_iter().map(|x| x.1).collect();
        l.chunks(steps_per_epoch.max(1))
            .filter(|c| c.len() == steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), TrainError> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e).map_err(|e| TrainError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, TrainError> {
        let mut events = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RunEvent =
                serde_json::from_str(&line).map_err(|e| TrainError::Format(format!("run log line {}: {e}", n + 1)))?;
            events.push(e);
        }
        if !matches!(events.first(), Some(RunEvent::Start { .. })) {
            return Err(TrainError::Format("run log does not open with a start event".into()));
        }
        Ok(Self { events })
    }
}
