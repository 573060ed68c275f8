use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureHasher, Role, TowerError};
use crate::autodiff::{Gradients, ParamUpdate, SparseRows, Tape, Tensor, Var};
use crate::container::{f32s_to_bytes, fnv64};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub num_buckets: u32,
    pub hidden: usize,
    /// Hidden-to-hidden layers after the input projection.
    pub hidden_layers: usize,
    pub d_full: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            num_buckets: 1 << 15,
            hidden: 64,
            hidden_layers: 2,
            d_full: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub frozen: bool,
}

impl Layer {
    fn random(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        Self {
            weight: Tensor::matrix(rows, cols, data).expect("sized"),
            bias: Tensor::vector(vec![0.0; cols]),
            frozen: false,
        }
    }

    fn identity(n: usize, m: usize) -> Self {
        let mut w = vec![0.0f32; n * m];
        for i in 0..m.min(n) {
            w[i * m + i] = 1.0;
        }
        Self {
            weight: Tensor::matrix(n, m, w).expect("sized"),
            bias: Tensor::vector(vec![0.0; m]),
            frozen: false,
        }
    }
}

/// One tower: hashed-input projection, GELU hidden layers, linear output,
/// optional dense projection head, then L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub config: TowerConfig,
    pub layers: Vec<Layer>,
    pub head: Option<Layer>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundTower {
    pub layers: Vec<(Var, Var)>,
    pub head: Option<(Var, Var)>,
}

impl BoundTower {
    /// `(name, weight var, bias var)` for every trainable tensor pair.
    pub fn trainable<'a>(&'a self, tower: &'a TowerParams) -> impl Iterator<Item = (String, Var, Var)> + 'a {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .filter(|(i, _)| !tower.layers[*i].frozen)
            .map(|(i, &(w, b))| (format!("layer{i}"), w, b));
        layers.chain(self.head.map(|(w, b)| ("head".to_string(), w, b)))
    }
}

pub const ENCODE_CHUNK: usize = 1024;

impl TowerParams {
    pub fn init(config: TowerConfig, seed_value: u64) -> Result<Self, TowerError> {
        if config.hidden == 0 || config.d_full == 0 || !config.num_buckets.is_power_of_two() {
            return Err(TowerError::Config(format!("invalid tower config {config:?}")));
        }
        let mut rng = seed::rng(seed_value, &[0x746f_7772]);
        let h = config.hidden;
        let mut layers = vec![Layer::random(config.num_buckets as usize, h, 1.0, &mut rng)];
        for _ in 0..config.hidden_layers {
            layers.push(Layer::random(h, h, (2.0 / h as f64).sqrt(), &mut rng));
        }
        layers.push(Layer::random(h, config.d_full, (1.0 / h as f64).sqrt(), &mut rng));
        Ok(Self {
            config,
            layers,
            head: None,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Width of the emitted embedding.
    pub fn out_dim(&self) -> usize {
        self.head.as_ref().map_or(self.config.d_full, |h| h.weight.cols())
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".to_string(), &h.weight));
            out.push(("head.bias".to_string(), &h.bias));
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        let (layer, part) = name.split_once('.')?;
        let l = if layer == "head" {
            self.head.as_mut()?
        } else {
            self.layers
                .get_mut(layer.strip_prefix("layer")?.parse::<usize>().ok()?)?
        };
        match part {
            "weight" => Some(&mut l.weight),
            "bias" => Some(&mut l.bias),
            _ => None,
        }
    }

    /// Content checksum over all parameters (or only the frozen ones).
    pub fn checksum(&self, frozen_only: bool) -> u64 {
        let mut bytes = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if frozen_only && !l.frozen {
                continue;
            }
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
            bytes.extend(f32s_to_bytes(l.weight.data()));
            bytes.extend(f32s_to_bytes(l.bias.data()));
        }
        if !frozen_only {
            if let Some(h) = &self.head {
                bytes.extend(f32s_to_bytes(h.weight.data()));
                bytes.extend(f32s_to_bytes(h.bias.data()));
            }
        }
        fnv64(&bytes)
    }

    /// Gradients of the trainable tensors, named `{prefix}.layer{i}.weight` etc.,
    /// in the order [`TowerParams::param_updates`] expects.
    pub fn gradients(&self, prefix: &str, bound: &BoundTower, grads: &Gradients<f32>) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, w, b) in bound.trainable(self) {
            out.push((format!("{prefix}.{name}.weight"), grads.wrt_or_zero(w)));
            out.push((format!("{prefix}.{name}.bias"), grads.wrt_or_zero(b)));
        }
        out
    }

    /// Number of entries [`TowerParams::gradients`] returns.
    pub fn gradients_len(&self) -> usize {
        2 * (self.layers.iter().filter(|l| !l.frozen).count() + usize::from(self.head.is_some()))
    }

    /// Pairs trainable tensors with gradients from [`TowerParams::gradients`].
    pub fn param_updates<'a>(&'a mut self, grads: &'a [(String, Vec<f32>)]) -> Vec<ParamUpdate<'a, f32>> {
        let mut slots: Vec<&'a mut Tensor<f32>> = Vec::new();
        for l in self.layers.iter_mut().filter(|l| !l.frozen) {
            slots.push(&mut l.weight);
            slots.push(&mut l.bias);
        }
        if let Some(h) = self.head.as_mut() {
            slots.push(&mut h.weight);
            slots.push(&mut h.bias);
        }
        debug_assert_eq!(slots.len(), grads.len());
        slots
            .into_iter()
            .zip(grads)
            .map(|(value, (name, grad))| ParamUpdate { name, value, grad })
            .collect()
    }

    /// Registers parameters on `tape`. Frozen layers enter as constants.
    pub fn bind(&self, tape: &mut Tape<f32>) -> BoundTower {
        let mut reg = |l: &Layer, trainable: bool| {
            if trainable {
                (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            }
        };
        let layers = self.layers.iter().map(|l| reg(l, !l.frozen)).collect();
        let head = self.head.as_ref().map(|h| reg(h, true));
        BoundTower { layers, head }
    }

    /// Unit-norm embeddings for a batch of hashed inputs.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        bound: &BoundTower,
        rows: Arc<SparseRows<f32>>,
    ) -> Result<Var, TowerError> {
        let (w0, b0) = bound.layers[0];
        let x = tape.embedding_bag(w0, rows)?;
        let x = tape.add_row(x, b0)?;
        let mut x = tape.gelu(x);
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate().skip(1) {
            let y = tape.matmul(x, w)?;
            let y = tape.add_row(y, b)?;
            x = if i == last { y } else { tape.gelu(y) };
        }
        let mut e = tape.l2_normalize(x)?;
        if let Some((w, b)) = bound.head {
            let y = tape.matmul(e, w)?;
            let y = tape.add_row(y, b)?;
            e = tape.l2_normalize(y)?;
        }
        Ok(e)
    }

    /// Encodes many blobs in eval mode, `ENCODE_CHUNK` rows at a time.
    pub fn encode_batch(&self, hasher: &FeatureHasher, blobs: &[&str], role: Role) -> Result<Tensor<f32>, TowerError> {
        if hasher.num_buckets != self.config.num_buckets {
            return Err(TowerError::Config(format!(
                "hasher has {} buckets, tower expects {}",
                hasher.num_buckets, self.config.num_buckets
            )));
        }
        let dim = self.out_dim();
        let mut out = Vec::with_capacity(blobs.len() * dim);
        for chunk in blobs.chunks(ENCODE_CHUNK) {
            let mut rows = SparseRows::new(hasher.num_buckets as usize);
            for b in chunk {
                rows.push_row(hasher.features(b, role)?);
            }
            let mut tape = Tape::eval();
            let bound = self.bind(&mut tape);
            let e = self.forward(&mut tape, &bound, Arc::new(rows))?;
            out.extend_from_slice(tape.value(e).data());
        }
        Ok(Tensor::matrix(blobs.len(), dim, out)?)
    }
}

/// Embedding of a single blob.
pub fn encode(tower: &TowerParams, hasher: &FeatureHasher, blob: &str, role: Role) -> Result<Vec<f32>, TowerError> {
    Ok(tower.encode_batch(hasher, &[blob], role)?.into_vec())
}

/// First `m` components re-normalized; `m` must be a declared cut.
pub fn truncate_mrl(v: &[f32], m: usize, cuts: &[usize]) -> Result<Vec<f32>, TowerError> {
    if !cuts.contains(&m) || m > v.len() {
        return Err(TowerError::Config(format!(
            "cut {m} is not among declared cuts {cuts:?} for width {}",
            v.len()
        )));
    }
    if m == v.len() {
        return Ok(v.to_vec());
    }
    let p = &v[..m];
    let n = p.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    Ok(p.iter().map(|x| x / n).collect())
}

/// Row-wise [`truncate_mrl`] over an embedding matrix.
pub fn truncate_matrix(e: &Tensor<f32>, m: usize, cuts: &[usize]) -> Result<Tensor<f32>, TowerError> {
    if m == e.cols() && cuts.contains(&m) {
        return Ok(e.clone());
    }
    let mut out = Vec::with_capacity(e.rows() * m);
    for r in 0..e.rows() {
        out.extend(truncate_mrl(e.row(r), m, cuts)?);
    }
    Ok(Tensor::matrix(e.rows(), m, out)?)
}

/// Marks all but the last `n` layers frozen.
pub fn freeze_boundary(tower: &TowerParams, n: usize) -> Result<TowerParams, TowerError> {
    let count = tower.layer_count();
    if n == 0 || n > count {
        return Err(TowerError::Config(format!(
            "{n} trainable layers requested, tower has {count}"
        )));
    }
    let mut t = tower.clone();
    for (i, l) in t.layers.iter_mut().enumerate() {
        l.frozen = i < count - n;
    }
    Ok(t)
}

/// Adds a trainable dense projection from `d_full` to `m`, identity-initialized.
pub fn fixed_projection_head(tower: &TowerParams, m: usize) -> Result<TowerParams, TowerError> {
    let d = tower.config.d_full;
    if m == 0 || m > d {
        return Err(TowerError::Config(format!("projection width {m} outside 1..={d}")));
    }
    let mut t = tower.clone();
    t.head = Some(Layer::identity(d, m));
    Ok(t)
}
