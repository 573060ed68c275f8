use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RerankError;
use crate::autodiff::{NumericsError, Real, Tape, Tensor, Var};
use crate::container::{bytes_to_f32s, content_id, f32s_to_bytes, Container};
use crate::seed;

pub const HEAD_KIND: [u8; 4] = *b"HEAD";
pub const HEAD_SCHEMA: u32 = 1;

const COSINE_INIT_INPUT_SCALE: f32 = 0.5;

/// Parameter names in storage and optimizer order.
pub const HEAD_TENSORS: [&str; 8] = ["w1", "b1", "w2", "b2", "ln_gain", "ln_bias", "w3", "b3"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Embedding prefix width `m`; the head reads `2·m` inputs.
    pub cut: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Squash the score with `tanh`.
    pub bound_output: bool,
}

impl HeadConfig {
    pub fn for_cut(cut: usize) -> Self {
        Self {
            cut,
            hidden: 4 * cut,
            // Dropout on the paired units of a cosine-initialized head leaves
            // uncancelled linear terms that swamp the product signal.
            dropout: 0.0,
            bound_output: false,
        }
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        if self.cut == 0 || self.hidden == 0 {
            return Err(RerankError::Config(format!("head widths must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(RerankError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn shapes(&self) -> [Vec<usize>; 8] {
        let (i, h) = (2 * self.cut, self.hidden);
        [
            vec![i, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h],
            vec![h],
            vec![h, 1],
            vec![1],
        ]
    }
}

/// Three-layer scoring network over `[q; d]`:
/// `s = W3 · LayerNorm(W2 · GELU(W1 z + b1) + b2) + b3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnHead {
    pub config: HeadConfig,
    /// Encoder artifact the head was trained against.
    pub encoder_tte_id: String,
    pub tensors: [Tensor<f32>; 8],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    head_id: String,
    encoder_tte_id: String,
    config: HeadConfig,
}

impl FfnHead {
    pub fn init(config: HeadConfig, encoder_tte_id: &str, seed_value: u64) -> Result<Self, RerankError> {
        config.validate()?;
        let mut rng = seed::rng(seed_value, &[0x6666_6e68]);
        let mut dense = |rows: usize, cols: usize| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let v = (0..rows * cols)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect();
            Tensor::matrix(rows, cols, v).expect("sized")
        };
        let (i, h) = (2 * config.cut, config.hidden);
        let tensors = [
            dense(i, h),
            Tensor::vector(vec![0.0; h]),
            dense(h, h),
            Tensor::vector(vec![0.0; h]),
            Tensor::vector(vec![1.0; h]),
            Tensor::vector(vec![0.0; h]),
            dense(h, 1),
            Tensor::vector(vec![0.0]),
        ];
        Ok(Self {
            config,
            encoder_tte_id: encoder_tte_id.to_string(),
            tensors,
        })
    }

    /// A head whose initial score is close to a monotone function of `q · d`.
    ///
    /// Four units per input dimension compute `GELU(±c(q_i + d_i))` and
    /// `GELU(±c(q_i - d_i))`; their signed sum cancels the odd terms of GELU
    /// and leaves `q_i d_i` up to fourth-order error. A single normalized
    /// coordinate then carries the sum. Needs `hidden >= 4·cut`.
    pub fn cosine_init(config: HeadConfig, encoder_tte_id: &str, seed_value: u64) -> Result<Self, RerankError> {
        config.validate()?;
        let (m, h) = (config.cut, config.hidden);
        if h < 4 * m || h < 2 {
            return Err(RerankError::Config(format!(
                "cosine init needs hidden >= {}, got {h}",
                4 * m
            )));
        }
        let mut head = Self::init(config, encoder_tte_id, seed_value)?;
        let c = COSINE_INIT_INPUT_SCALE;
        let mut w1 = vec![0.0f32; 2 * m * h];
        let mut w2 = vec![0.0f32; h * h];
        for i in 0..m {
            for (u, (sq, sd, sign)) in [(1.0, 1.0, 1.0), (-1.0, -1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0)]
                .into_iter()
                .enumerate()
            {
                let unit = 4 * i + u;
                w1[i * h + unit] = sq * c;
                w1[(m + i) * h + unit] = sd * c;
                w2[unit * h] = sign;
            }
        }
        let mut rng = seed::rng(seed_value, &[0x636f_7369]);
        let mut noise = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * 1e-2) as f32)
                .collect()
        };
        for (w, e) in w2.iter_mut().zip(noise(h * h)) {
            *w += e;
        }
        let b2: Vec<f32> = (0..h)
            .map(|j| {
                if j == 0 {
                    0.0
                } else if j % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let mut w3 = noise(h);
        // Initial scores span roughly the range of cosine logits at a
        // temperature of 0.07.
        let gain = 8.0 * c * c / (2.0 * std::f32::consts::PI).sqrt();
        w3[0] += 1.0 / (0.07 * gain);
        head.tensors[0] = Tensor::matrix(2 * m, h, w1)?;
        head.tensors[1] = Tensor::vector(vec![0.0; h]);
        head.tensors[2] = Tensor::matrix(h, h, w2)?;
        head.tensors[3] = Tensor::vector(b2);
        head.tensors[6] = Tensor::matrix(h, 1, w3)?;
        Ok(head)
    }

    /// Content-derived version id, distinct from the encoder's.
    pub fn head_id(&self) -> String {
        let mut b = serde_json::to_vec(&(&self.config, &self.encoder_tte_id)).expect("plain data");
        for (name, t) in HEAD_TENSORS.iter().zip(&self.tensors) {
            b.extend_from_slice(name.as_bytes());
            b.extend(f32s_to_bytes(t.data()));
        }
        content_id("ffn", &b)
    }

    /// Registers the parameters on `tape`, cast to its precision.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> [Var; 8] {
        std::array::from_fn(|i| {
            let t = self.tensors[i].cast::<T>();
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
    }

    /// Eval-mode scores of one query against many documents.
    pub fn score_many(&self, q: &[f32], docs: &[&[f32]]) -> Result<Vec<f32>, RerankError> {
        let m = self.config.cut;
        if q.len() != m {
            return Err(RerankError::Dimension(format!(
                "query has {} dims, head expects {m}",
                q.len()
            )));
        }
        if docs.is_empty() {
            return Ok(Vec::new());
        }
        let mut z = Vec::with_capacity(docs.len() * 2 * m);
        for d in docs {
            if d.len() != m {
                return Err(RerankError::Dimension(format!(
                    "document has {} dims, head expects {m}",
                    d.len()
                )));
            }
            z.extend_from_slice(q);
            z.extend_from_slice(d);
        }
        let mut tape = Tape::<f32>::eval();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(Tensor::matrix(docs.len(), 2 * m, z)?);
        let s = head_forward(&mut tape, &vars, z, &self.config, 0)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            head_id: self.head_id(),
            encoder_tte_id: self.encoder_tte_id.clone(),
            config: self.config,
        };
        let mut c = Container::new(HEAD_KIND, HEAD_SCHEMA);
        c.push("header", serde_json::to_vec(&header).expect("plain data"));
        for (name, t) in HEAD_TENSORS.iter().zip(&self.tensors) {
            c.push(*name, f32s_to_bytes(t.data()));
        }
        c.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RerankError> {
        let c = Container::decode(bytes, HEAD_KIND, HEAD_SCHEMA)?;
        let header: Header =
            serde_json::from_slice(c.blob("header")?).map_err(|e| RerankError::Format(format!("head header: {e}")))?;
        header.config.validate()?;
        let shapes = header.config.shapes();
        let mut tensors = Vec::with_capacity(8);
        for (name, shape) in HEAD_TENSORS.iter().zip(shapes) {
            let v = bytes_to_f32s(name, c.blob(name)?)?;
            tensors.push(Tensor::new(shape, v).map_err(|e| RerankError::Format(format!("{name}: {e}")))?);
        }
        let head = Self {
            config: header.config,
            encoder_tte_id: header.encoder_tte_id,
            tensors: tensors.try_into().expect("eight tensors"),
        };
        if head.head_id() != header.head_id {
            return Err(RerankError::Format(format!(
                "stored head id {} does not match content ({})",
                header.head_id,
                head.head_id()
            )));
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<(), RerankError> {
        crate::fsutil::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RerankError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Forward pass over a `n × 2m` input, returning `n × 1` scores. Dropout
/// follows the first activation and is inactive on eval tapes.
pub fn head_forward<T: Real>(
    tape: &mut Tape<T>,
    v: &[Var; 8],
    z: Var,
    config: &HeadConfig,
    dropout_seed: u64,
) -> Result<Var, NumericsError> {
    let [w1, b1, w2, b2, gain, beta, w3, b3] = *v;
    let x = tape.matmul(z, w1)?;
    let x = tape.add_row(x, b1)?;
    let x = tape.gelu(x);
    let x = tape.dropout(x, 1.0 - config.dropout, dropout_seed)?;
    let x = tape.matmul(x, w2)?;
    let x = tape.add_row(x, b2)?;
    let x = tape.layer_norm(x, gain, beta)?;
    let s = tape.matmul(x, w3)?;
    let s = tape.add_row(s, b3)?;
    Ok(if config.bound_output { tape.tanh(s) } else { s })
}

/// Eval-mode score of a single `(q, d)` pair.
pub fn ffn_score(head: &FfnHead, q: &[f32], d: &[f32]) -> Result<f32, RerankError> {
    Ok(head.score_many(q, &[d])?[0])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};

    fn unit(rng: &mut ChaCha8Rng, m: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..m).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn zero_weights_score_the_output_bias() {
        let mut h = FfnHead::init(HeadConfig::for_cut(8), "tte-x", 1).unwrap();
        for t in h.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        h.tensors[7] = Tensor::vector(vec![0.375]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (q, d) = (unit(&mut rng, 8), unit(&mut rng, 8));
            assert_eq!(ffn_score(&h, &q, &d).unwrap(), 0.375);
        }
    }

    #[test]
    fn cosine_init_orders_like_the_dot_product() {
        let cfg = HeadConfig::for_cut(16);
        let h = FfnHead::cosine_init(cfg, "tte-x", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut agree = 0;
        let trials = 200;
        for _ in 0..trials {
            let q = unit(&mut rng, 16);
            let a = unit(&mut rng, 16);
            let b = unit(&mut rng, 16);
            let dot = |d: &[f32]| q.iter().zip(d).map(|(x, y)| x * y).sum::<f32>();
            let (sa, sb) = (ffn_score(&h, &q, &a).unwrap(), ffn_score(&h, &q, &b).unwrap());
            // Near-ties in the dot product may go either way.
            if (dot(&a) - dot(&b)).abs() <= 0.05 || (sa > sb) == (dot(&a) > dot(&b)) {
                agree += 1;
            }
        }
        assert!(agree >= trials * 97 / 100, "{agree}/{trials}");
        assert!(FfnHead::cosine_init(HeadConfig { hidden: 8, ..cfg }, "tte-x", 1).is_err());
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let h = FfnHead::init(HeadConfig::for_cut(8), "tte-x", 1).unwrap();
        let q = vec![0.0; 8];
        assert!(matches!(ffn_score(&h, &q, &[0.0; 16]), Err(RerankError::Dimension(_))));
        assert!(matches!(ffn_score(&h, &[0.0; 4], &q), Err(RerankError::Dimension(_))));
    }

    #[test]
    fn eval_scores_are_deterministic_and_batch_consistent() {
        let h = FfnHead::init(HeadConfig::for_cut(8), "tte-x", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = unit(&mut rng, 8);
        let docs: Vec<Vec<f32>> = (0..6).map(|_| unit(&mut rng, 8)).collect();
        let refs: Vec<&[f32]> = docs.iter().map(|d| d.as_slice()).collect();
        let a = h.score_many(&q, &refs).unwrap();
        assert_eq!(a, h.score_many(&q, &refs).unwrap());
        for (d, s) in docs.iter().zip(&a) {
            assert!((ffn_score(&h, &q, d).unwrap() - s).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_only_acts_on_training_tapes() {
        let cfg = HeadConfig {
            dropout: 0.5,
            ..HeadConfig::for_cut(4)
        };
        let h = FfnHead::init(cfg, "tte-x", 6).unwrap();
        let z = Tensor::matrix(3, 8, (0..24).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let run = |mut tape: Tape<f32>, seed: u64| {
            let v = h.bind(&mut tape, false);
            let z = tape.constant(z.clone());
            let s = head_forward(&mut tape, &v, z, &cfg, seed).unwrap();
            tape.value(s).data().to_vec()
        };
        let eval = run(Tape::eval(), 1);
        assert_eq!(eval, run(Tape::eval(), 2));
        assert_ne!(eval, run(Tape::new(), 1));
        assert_eq!(run(Tape::new(), 1), run(Tape::new(), 1));
    }

    #[test]
    fn tanh_bound_keeps_scores_in_range() {
        let mut cfg = HeadConfig::for_cut(4);
        cfg.bound_output = true;
        let mut h = FfnHead::init(cfg, "tte-x", 2).unwrap();
        h.tensors[7] = Tensor::vector(vec![50.0]);
        let s = ffn_score(&h, &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(s <= 1.0 && s > 0.99);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let cfg = HeadConfig {
            dropout: 0.0,
            ..HeadConfig::for_cut(3)
        };
        for seed in 0..20u64 {
            for bound in [false, true] {
                let cfg = HeadConfig {
                    bound_output: bound,
                    ..cfg
                };
                let h = FfnHead::init(cfg, "tte-x", seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let z: Vec<f64> = (0..4 * 6).map(|_| rng.sample(StandardNormal)).collect();
                let mut inputs: Vec<(String, Tensor<f64>)> = HEAD_TENSORS
                    .iter()
                    .zip(&h.tensors)
                    .map(|(n, t)| (n.to_string(), t.cast()))
                    .collect();
                for (_, t) in inputs.iter_mut().skip(1) {
                    t.data_mut()
                        .iter_mut()
                        .for_each(|x| *x += rng.sample::<f64, _>(StandardNormal) * 0.3);
                }
                inputs.push(("z".into(), Tensor::matrix(4, 6, z).unwrap()));
                let report = grad_check(
                    |tape, vars| {
                        let p: [Var; 8] = vars[..8].try_into().unwrap();
                        let s = head_forward(tape, &p, vars[8], &cfg, 0)?;
                        let w = tape.constant(Tensor::matrix(4, 1, vec![0.7, -1.3, 0.4, 2.0])?);
                        let s = tape.mul(s, w)?;
                        Ok(tape.sum(s))
                    },
                    &inputs,
                    GradCheckConfig::default(),
                )
                .unwrap();
                assert!(report.passed(), "seed {seed} bound {bound}: {}", report.max_rel_err());
            }
        }
    }

    #[test]
    fn persistence_round_trips_and_detects_tampering() {
        let h = FfnHead::init(HeadConfig::for_cut(8), "tte-abc", 9).unwrap();
        let bytes = h.to_bytes();
        let back = FfnHead::from_bytes(&bytes).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.head_id(), h.head_id());
        assert_ne!(
            h.head_id(),
            FfnHead::init(HeadConfig::for_cut(8), "tte-abd", 9).unwrap().head_id()
        );
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 1;
        assert!(FfnHead::from_bytes(&bad).is_err());
    }
}
