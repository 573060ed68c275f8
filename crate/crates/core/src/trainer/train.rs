use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{
    Checkpoint, Featurized, HardSet, InBatchLoss, RunEvent, RunRecord, Stage, TrainConfig, TrainData, TrainError,
};
use crate::autodiff::{AdamConfig, AdamState, NumericsError, ParamUpdate, Tape, Tensor};
use crate::container::content_id;
use crate::objectives::{
    hit_at_k, info_nce, mrl_wrap, siglip_loss, triplet_nce, ContrastiveBatch, HardExampleBatch, MrlConfig, SiglipParams,
};
use crate::seed;
use crate::towers::{freeze_boundary, truncate_matrix, ModelArtifact, TowerParams, ENCODE_CHUNK};

type NamedGrads = Vec<(String, Vec<f32>)>;

/// Eval-mode embeddings of the records at `idx`.
pub fn embed_indices(tower: &TowerParams, features: &Featurized, idx: &[usize]) -> Result<Tensor<f32>, TrainError> {
    let dim = tower.out_dim();
    let mut out = Vec::with_capacity(idx.len() * dim);
    for chunk in idx.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::eval();
        let bound = tower.bind(&mut tape);
        let e = tower.forward(&mut tape, &bound, features.batch(chunk))?;
        out.extend_from_slice(tape.value(e).data());
    }
    Ok(Tensor::matrix(idx.len(), dim, out)?)
}

/// Mean block Hit@k of `model` on the palette at cut `m`.
pub fn palette_hit_rate(model: &ModelArtifact, data: &TrainData, k: usize, m: usize) -> Result<f64, TrainError> {
    let p = &data.palette;
    let qi: Vec<usize> = p.pairs.iter().map(|x| x.0).collect();
    let di: Vec<usize> = p.pairs.iter().map(|x| x.1).collect();
    let cuts = if m == model.d_full() {
        vec![m]
    } else {
        model.mrl_cuts.clone()
    };
    let q = truncate_matrix(&embed_indices(&model.query, &data.features, &qi)?, m, &cuts)?;
    let d = truncate_matrix(&embed_indices(&model.doc, &data.features, &di)?, m, &cuts)?;
    let b = p.block;
    let mut total = 0.0;
    let blocks = p.pairs.len() / b;
    for blk in 0..blocks {
        let mut logits = Vec::with_capacity(b * b);
        for i in 0..b {
            let qr = q.row(blk * b + i);
            for j in 0..b {
                logits.push(qr.iter().zip(d.row(blk * b + j)).map(|(x, y)| x * y).sum::<f32>());
            }
        }
        let labels: Vec<usize> = (0..b).collect();
        total += hit_at_k(&Tensor::matrix(b, b, logits)?, &labels, k.min(b))?;
    }
    Ok(total / blocks as f64)
}

/// Mean similarity over mined positives minus mean over mined negatives.
pub fn hard_negative_margin(model: &ModelArtifact, features: &Featurized, sets: &[HardSet]) -> Result<f64, TrainError> {
    let queries: Vec<usize> = sets.iter().map(|s| s.query).collect();
    let docs: Vec<usize> = sets
        .iter()
        .flat_map(|s| s.positives.iter().chain(&s.negatives).copied())
        .collect();
    let q = embed_indices(&model.query, features, &queries)?;
    let d = embed_indices(&model.doc, features, &docs)?;
    let (mut pos, mut np, mut neg, mut nn) = (0.0f64, 0usize, 0.0f64, 0usize);
    let mut o = 0;
    for (i, s) in sets.iter().enumerate() {
        let qr = q.row(i);
        let dot = |r: usize| qr.iter().zip(d.row(r)).map(|(a, b)| (a * b) as f64).sum::<f64>();
        for _ in &s.positives {
            pos += dot(o);
            np += 1;
            o += 1;
        }
        for _ in &s.negatives {
            neg += dot(o);
            nn += 1;
            o += 1;
        }
    }
    if np == 0 || nn == 0 {
        return Err(TrainError::Data("margin needs both positive and negative pairs".into()));
    }
    Ok(pos / np as f64 - neg / nn as f64)
}

/// Optimizer loop over one stage. Single-threaded; with a fixed
/// configuration, seed and data every step is reproducible bit for bit.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainData,
    init: ModelArtifact,
    mrl: MrlConfig,
    query: TowerParams,
    doc: TowerParams,
    siglip: Option<(Tensor<f32>, Tensor<f32>)>,
    adam: AdamState<f32>,
    step: usize,
    record: RunRecord,
    order: Option<(usize, Vec<usize>)>,
    checkpoint_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainData, init: &ModelArtifact) -> Result<Self, TrainError> {
        config.validate()?;
        if init.hasher != data.features.hasher {
            return Err(TrainError::Config(
                "artifact hasher differs from the featurized data".into(),
            ));
        }
        let mrl = config.mrl(init.d_full())?;
        match config.stage {
            Stage::InfoNce => {
                if data.pairs.len() < config.micro_batch {
                    return Err(TrainError::Data(format!(
                        "{} pairs cannot fill a micro-batch of {}",
                        data.pairs.len(),
                        config.micro_batch
                    )));
                }
            }
            Stage::TripletNce => {
                let complete = data
                    .hard
                    .iter()
                    .filter(|s| !s.positives.is_empty() && !s.negatives.is_empty())
                    .count();
                if data.hard.len() < config.micro_batch || 2 * complete < data.hard.len() {
                    return Err(TrainError::Data(format!(
                        "{} hard sets ({complete} with both sides) for micro-batch {}",
                        data.hard.len(),
                        config.micro_batch
                    )));
                }
            }
        }
        let prepare = |t: &TowerParams| -> Result<TowerParams, TrainError> {
            Ok(freeze_boundary(t, config.trainable_layers.unwrap_or(t.layer_count()))?)
        };
        let query = prepare(&init.query)?;
        let doc = prepare(&init.doc)?;
        let siglip = (config.stage == Stage::InfoNce && config.in_batch_loss == InBatchLoss::Siglip).then(|| {
            (
                Tensor::vector(vec![config.siglip_temperature.ln() as f32]),
                Tensor::vector(vec![config.siglip_bias as f32]),
            )
        });
        let fingerprint = format!("{:016x}", data.fingerprint());
        let cfg_json = serde_json::to_string(&config).expect("plain data");
        let run_id = content_id("run", format!("{cfg_json}/{fingerprint}/{}", init.tte_id).as_bytes());
        let record = RunRecord::new(RunEvent::Start {
            run_id,
            config: config.clone(),
            data_fingerprint: fingerprint,
            init_tte_id: init.tte_id.clone(),
        });
        let adam = AdamState::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let mut t = Self {
            config,
            data,
            init: init.clone(),
            mrl,
            query,
            doc,
            siglip,
            adam,
            step: 0,
            record,
            order: None,
            checkpoint_dir: None,
            last_checkpoint: None,
        };
        if t.config.eval_interval > 0 {
            t.log_hit()?;
        }
        Ok(t)
    }

    /// Continues from a checkpoint written by a run with a compatible config.
    pub fn resume(
        config: TrainConfig,
        data: &'a TrainData,
        init: &ModelArtifact,
        path: &Path,
    ) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(path).map_err(|e| TrainError::Resume(format!("{}: {e}", path.display())))?;
        if !config.resumable_from(&ck.config) {
            return Err(TrainError::Resume(
                "configuration differs from the checkpointed run".into(),
            ));
        }
        if ck.init_tte_id != init.tte_id {
            return Err(TrainError::Resume(format!(
                "checkpoint starts from {}, not {}",
                ck.init_tte_id, init.tte_id
            )));
        }
        let mut t = Self::new_silent(config, data, init)?;
        let fingerprint = format!("{:016x}", data.fingerprint());
        match ck.events.first() {
            Some(RunEvent::Start { data_fingerprint, .. }) if *data_fingerprint == fingerprint => {}
            _ => return Err(TrainError::Resume("checkpoint was written over different data".into())),
        }
        t.query = ck.model.query;
        t.doc = ck.model.doc;
        t.adam = ck.adam;
        t.siglip = ck.siglip;
        t.step = ck.step;
        t.record = RunRecord::new(ck.events[0].clone());
        for e in &ck.events[1..] {
            t.record.push(e.clone());
        }
        t.last_checkpoint = Some(path.to_path_buf());
        Ok(t)
    }

    fn new_silent(config: TrainConfig, data: &'a TrainData, init: &ModelArtifact) -> Result<Self, TrainError> {
        let cfg = TrainConfig {
            eval_interval: 0,
            ..config.clone()
        };
        let mut t = Self::new(cfg, data, init)?;
        t.config = config;
        Ok(t)
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn towers(&self) -> (&TowerParams, &TowerParams) {
        (&self.query, &self.doc)
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    /// Micro-batches per pass over the training data.
    pub fn micro_batches_per_epoch(&self) -> usize {
        let n = match self.config.stage {
            Stage::InfoNce => self.data.pairs.len(),
            Stage::TripletNce => self.data.hard.len(),
        };
        n / self.config.micro_batch
    }

    /// Optimizer steps per pass over the training data.
    pub fn steps_per_epoch(&self) -> usize {
        (self.micro_batches_per_epoch() / self.config.accumulation_steps).max(1)
    }

    fn micro_batch_items(&mut self, u: usize) -> Vec<usize> {
        let per_epoch = self.micro_batches_per_epoch();
        let (epoch, b) = (u / per_epoch, u % per_epoch);
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let n = match self.config.stage {
                Stage::InfoNce => self.data.pairs.len(),
                Stage::TripletNce => self.data.hard.len(),
            };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(self.config.seed, &[0x6570_6f63, epoch as u64]));
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("filled above").1;
        let bs = self.config.micro_batch;
        order[b * bs..(b + 1) * bs].to_vec()
    }

    fn micro_batch(&mut self, u: usize) -> Result<(f64, NamedGrads), TrainError> {
        let items = self.micro_batch_items(u);
        let data = self.data;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let bq = self.query.bind(&mut tape);
        let bd = self.doc.bind(&mut tape);
        let mut sig_vars = None;
        let loss = match cfg.stage {
            Stage::InfoNce => {
                let pairs: Vec<_> = items.iter().map(|&i| data.pairs[i]).collect();
                let qi: Vec<usize> = pairs.iter().map(|p| p.query).collect();
                let di: Vec<usize> = pairs.iter().map(|p| p.doc).collect();
                let q = self.query.forward(&mut tape, &bq, data.features.batch(&qi))?;
                let d = self.doc.forward(&mut tape, &bd, data.features.batch(&di))?;
                match &self.siglip {
                    Some((t, b)) => {
                        let params = SiglipParams {
                            log_temperature: tape.param(t.clone()),
                            bias: tape.param(b.clone()),
                        };
                        sig_vars = Some(params);
                        mrl_wrap(&mut tape, &self.mrl, q, d, |tp, q, d| {
                            siglip_loss(tp, &ContrastiveBatch::new(q, d), params)
                        })?
                    }
                    None => {
                        let w: Option<Vec<f32>> =
                            cfg.use_weights.then(|| pairs.iter().map(|p| p.weight as f32).collect());
                        let tau = cfg.temperature;
                        mrl_wrap(&mut tape, &self.mrl, q, d, |tp, q, d| {
                            let mut batch = ContrastiveBatch::new(q, d);
                            if let Some(w) = &w {
                                batch = batch.with_weights(w.clone());
                            }
                            info_nce(tp, &batch, tau)
                        })?
                    }
                }
            }
            Stage::TripletNce => {
                let sets: Vec<&HardSet> = items.iter().map(|&i| &data.hard[i]).collect();
                let qi: Vec<usize> = sets.iter().map(|s| s.query).collect();
                let mut di: Vec<usize> = Vec::new();
                let mut slot: HashMap<usize, usize> = HashMap::new();
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for (r, s) in sets.iter().enumerate() {
                    for (list, out) in [(&s.positives, &mut pos), (&s.negatives, &mut neg)] {
                        for &d in list.iter() {
                            let j = *slot.entry(d).or_insert_with(|| {
                                di.push(d);
                                di.len() - 1
                            });
                            out.push((r, j));
                        }
                    }
                }
                let q = self.query.forward(&mut tape, &bq, data.features.batch(&qi))?;
                let d = self.doc.forward(&mut tape, &bd, data.features.batch(&di))?;
                let tau = cfg.temperature;
                mrl_wrap(&mut tape, &self.mrl, q, d, |tp, q, d| {
                    let batch = HardExampleBatch {
                        queries: q,
                        docs: d,
                        positives: pos.clone(),
                        negatives: neg.clone(),
                    };
                    triplet_nce(tp, &batch, tau)
                })?
            }
        };
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let mut grads = self.query.gradients("query", &bq, &g);
        grads.extend(self.doc.gradients("doc", &bd, &g));
        if let Some(p) = sig_vars {
            grads.push(("siglip.log_temperature".into(), g.wrt_or_zero(p.log_temperature)));
            grads.push(("siglip.bias".into(), g.wrt_or_zero(p.bias)));
        }
        Ok((value, grads))
    }

    /// Mean loss and mean gradients of the next optimizer step, without
    /// applying them.
    pub fn accumulated_gradients(&mut self) -> Result<(f64, NamedGrads), TrainError> {
        let g = self.config.accumulation_steps;
        let mut loss = 0.0;
        let mut acc: Option<NamedGrads> = None;
        for j in 0..g {
            let (l, grads) = self.micro_batch(self.step * g + j)?;
            loss += l;
            if !l.is_finite() {
                return Ok((f64::NAN, Vec::new()));
            }
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for ((_, x), (_, y)) in a.iter_mut().zip(&grads) {
                        for (p, q) in x.iter_mut().zip(y) {
                            *p += q;
                        }
                    }
                    a
                }
            });
        }
        let mut acc = acc.expect("at least one micro-batch");
        if g > 1 {
            let s = 1.0 / g as f32;
            for (_, x) in acc.iter_mut() {
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok((loss / g as f64, acc))
    }

    fn abort(&mut self, reason: String) -> TrainError {
        self.record.push(RunEvent::Abort {
            step: self.step + 1,
            reason,
        });
        if let Some(dir) = &self.checkpoint_dir {
            let _ = std::fs::create_dir_all(dir);
            if let Ok(f) = std::fs::File::create(dir.join("run.jsonl")) {
                let _ = self.record.write_jsonl(std::io::BufWriter::new(f));
            }
        }
        TrainError::NonFinite {
            step: self.step + 1,
            checkpoint: self.last_checkpoint.clone(),
        }
    }

    /// One optimizer step. Returns the mean micro-batch loss.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let (loss, grads) = self.accumulated_gradients()?;
        if !loss.is_finite() {
            return Err(self.abort(format!("loss is {loss}")));
        }
        let nq = self.query.gradients_len();
        let nd = self.doc.gradients_len();
        let (gq, rest) = grads.split_at(nq);
        let (gd, gs) = rest.split_at(nd);
        let mut updates: Vec<ParamUpdate<'_, f32>> = self.query.param_updates(gq);
        updates.extend(self.doc.param_updates(gd));
        if let Some((t, b)) = self.siglip.as_mut() {
            updates.push(ParamUpdate {
                name: &gs[0].0,
                value: t,
                grad: &gs[0].1,
            });
            updates.push(ParamUpdate {
                name: &gs[1].0,
                value: b,
                grad: &gs[1].1,
            });
        }
        match self.adam.step(&mut updates) {
            Ok(()) => {}
            Err(NumericsError::NonFiniteGradient { param }) => {
                drop(updates);
                return Err(self.abort(format!("non-finite gradient for {param}")));
            }
            Err(e) => return Err(e.into()),
        }
        drop(updates);
        self.step += 1;
        self.record.push(RunEvent::Loss { step: self.step, loss });
        if self.config.eval_interval > 0 && self.step.is_multiple_of(self.config.eval_interval) {
            self.log_hit()?;
        }
        if self.config.checkpoint_interval > 0 && self.step.is_multiple_of(self.config.checkpoint_interval) {
            if let Some(dir) = self.checkpoint_dir.clone() {
                let path = dir.join(format!("step-{:06}.ckpt", self.step));
                self.checkpoint().save(&path)?;
                self.record.push(RunEvent::Checkpoint {
                    step: self.step,
                    file: format!("step-{:06}.ckpt", self.step),
                });
                self.last_checkpoint = Some(path);
            }
        }
        Ok(loss)
    }

    /// Steps until `max_steps`.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.step < self.config.max_steps {
            self.train_step()?;
        }
        Ok(())
    }

    fn current(&self) -> Result<ModelArtifact, TrainError> {
        Ok(self.init.rebuild(self.query.clone(), self.doc.clone())?)
    }

    fn log_hit(&mut self) -> Result<(), TrainError> {
        let model = self.current()?;
        let value = palette_hit_rate(&model, self.data, self.config.eval_k, model.d_full())?;
        self.record.push(RunEvent::Hit {
            step: self.step,
            k: self.config.eval_k,
            value,
        });
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            init_tte_id: self.init.tte_id.clone(),
            model: self.current().expect("towers validated at construction"),
            adam: self.adam.clone(),
            siglip: self.siglip.clone(),
            events: self.record.events().to_vec(),
        }
    }

    /// Current SigLIP temperature and bias, when training with SigLIP.
    pub fn siglip_state(&self) -> Option<(f64, f64)> {
        self.siglip
            .as_ref()
            .map(|(t, b)| ((t.data()[0] as f64).exp(), b.data()[0] as f64))
    }

    /// The trained artifact. Without any step taken this is the initial
    /// artifact itself.
    pub fn finish(mut self) -> Result<(ModelArtifact, RunRecord), TrainError> {
        let model = if self.step == 0 {
            self.init.clone()
        } else {
            self.current()?
        };
        if self.config.eval_interval > 0 && !self.step.is_multiple_of(self.config.eval_interval) {
            self.log_hit()?;
        }
        self.record.push(RunEvent::Artifact {
            tte_id: model.tte_id.clone(),
            query_model_id: model.query_model_id.clone(),
            doc_model_id: model.doc_model_id.clone(),
        });
        Ok((model, self.record))
    }
}

fn run_stage(
    config: &TrainConfig,
    data: &TrainData,
    init: &ModelArtifact,
    expect: Stage,
    checkpoints: Option<&Path>,
) -> Result<(ModelArtifact, RunRecord), TrainError> {
    if config.stage != expect {
        return Err(TrainError::Config(format!(
            "expected a {expect:?} configuration, got {:?}",
            config.stage
        )));
    }
    let mut t = Trainer::new(config.clone(), data, init)?;
    if let Some(dir) = checkpoints {
        t = t.with_checkpoint_dir(dir);
    }
    t.run()?;
    t.finish()
}

/// In-batch contrastive training over logged pairs.
pub fn train_stage1(
    config: &TrainConfig,
    data: &TrainData,
    init: &ModelArtifact,
    checkpoints: Option<&Path>,
) -> Result<(ModelArtifact, RunRecord), TrainError> {
    run_stage(config, data, init, Stage::InfoNce, checkpoints)
}

/// Hard-example fine-tuning of a stage-1 artifact.
pub fn train_stage2(
    config: &TrainConfig,
    data: &TrainData,
    stage1: &ModelArtifact,
    checkpoints: Option<&Path>,
) -> Result<(ModelArtifact, RunRecord), TrainError> {
    run_stage(config, data, stage1, Stage::TripletNce, checkpoints)
}
