use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};

use super::ObjectiveError;

/// Nested prefix cuts and their loss weights `c^(m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrlConfig {
    pub cuts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl MrlConfig {
    /// Unit weights on every cut.
    pub fn new(cuts: Vec<usize>) -> Result<Self, ObjectiveError> {
        let weights = vec![1.0; cuts.len()];
        Self::with_weights(cuts, weights)
    }

    pub fn with_weights(cuts: Vec<usize>, weights: Vec<f64>) -> Result<Self, ObjectiveError> {
        if cuts.is_empty() {
            return Err(ObjectiveError::Config("MRL needs at least one cut".into()));
        }
        if cuts[0] == 0 || cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ObjectiveError::Config(format!(
                "cuts {cuts:?} must be positive and strictly increasing"
            )));
        }
        if weights.len() != cuts.len() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(ObjectiveError::Config(format!(
                "weights {weights:?} must be positive, one per cut"
            )));
        }
        Ok(Self { cuts, weights })
    }

    /// The trivial configuration `{d_full}`.
    pub fn single(d_full: usize) -> Self {
        Self {
            cuts: vec![d_full],
            weights: vec![1.0],
        }
    }

    pub fn max_cut(&self) -> usize {
        *self.cuts.last().expect("validated non-empty")
    }
}

/// First `m` columns of unit-norm rows, re-normalized. `m` equal to the full
/// width returns `x` unchanged.
pub fn truncate_rows<T: Real>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var, ObjectiveError> {
    let width = tape.value(x).cols();
    if m == 0 || m > width {
        return Err(ObjectiveError::Config(format!(
            "cut {m} outside embedding width {width}"
        )));
    }
    if m == width {
        return Ok(x);
    }
    let s = tape.slice_cols(x, 0, m)?;
    Ok(tape.l2_normalize(s)?)
}

/// `Σ_m c^(m) · base(E^(m)(q), E^(m)(d))`.
pub fn mrl_wrap<T, F>(
    tape: &mut Tape<T>,
    cfg: &MrlConfig,
    queries: Var,
    docs: Var,
    mut base: F,
) -> Result<Var, ObjectiveError>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var, Var) -> Result<Var, ObjectiveError>,
{
    let width = tape.value(queries).cols();
    if let Some(&bad) = cfg.cuts.iter().find(|&&m| m > width) {
        return Err(ObjectiveError::Config(format!(
            "cut {bad} exceeds embedding width {width}"
        )));
    }
    let mut total: Option<Var> = None;
    for (&m, &c) in cfg.cuts.iter().zip(&cfg.weights) {
        let q = truncate_rows(tape, queries, m)?;
        let d = truncate_rows(tape, docs, m)?;
        let l = base(tape, q, d)?;
        let term = if c == 1.0 { l } else { tape.scale(l, T::from_f64(c)) };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("validated non-empty"))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig, NumericsError, Tensor};
    use crate::objectives::{info_nce, triplet_nce, ContrastiveBatch, HardExampleBatch};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn nce(t: &mut Tape<f64>, q: Var, d: Var) -> Result<Var, ObjectiveError> {
        info_nce(t, &ContrastiveBatch::new(q, d), 0.07)
    }

    fn setup(seed: u64) -> (Tape<f64>, Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let qr = t.param(randn(&mut rng, 8, 16));
        let dr = t.param(randn(&mut rng, 8, 16));
        let q = t.l2_normalize(qr).unwrap();
        let d = t.l2_normalize(dr).unwrap();
        (t, q, d)
    }

    #[test]
    fn config_validation() {
        assert!(MrlConfig::new(vec![8, 16, 32, 64]).is_ok());
        assert!(MrlConfig::new(vec![16, 8]).is_err());
        assert!(MrlConfig::new(vec![]).is_err());
        assert!(MrlConfig::with_weights(vec![8, 16], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn single_full_cut_equals_base_loss_bit_exactly() {
        let (mut t, q, d) = setup(1);
        let base = nce(&mut t, q, d).unwrap();
        let wrapped = mrl_wrap(&mut t, &MrlConfig::single(16), q, d, nce).unwrap();
        assert_eq!(t.value(base).item().to_bits(), t.value(wrapped).item().to_bits());
    }

    #[test]
    fn two_cuts_sum_standalone_losses() {
        let (mut t, q, d) = setup(2);
        let q8 = truncate_rows(&mut t, q, 8).unwrap();
        let d8 = truncate_rows(&mut t, d, 8).unwrap();
        let l8 = nce(&mut t, q8, d8).unwrap();
        let l16 = nce(&mut t, q, d).unwrap();
        let sum = t.value(l8).item() + t.value(l16).item();
        let w = mrl_wrap(&mut t, &MrlConfig::new(vec![8, 16]).unwrap(), q, d, nce).unwrap();
        assert!((t.value(w).item() - sum).abs() < 1e-12);
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let (mut t, q, d) = setup(3);
        let one = mrl_wrap(&mut t, &MrlConfig::new(vec![4, 16]).unwrap(), q, d, nce).unwrap();
        let two = mrl_wrap(
            &mut t,
            &MrlConfig::with_weights(vec![4, 16], vec![2.0, 1.0]).unwrap(),
            q,
            d,
            nce,
        )
        .unwrap();
        let q4 = truncate_rows(&mut t, q, 4).unwrap();
        let d4 = truncate_rows(&mut t, d, 4).unwrap();
        let l4 = nce(&mut t, q4, d4).unwrap();
        let diff = t.value(two).item() - t.value(one).item();
        assert!((diff - t.value(l4).item()).abs() < 1e-12);
    }

    #[test]
    fn cut_beyond_width_is_config_error() {
        let (mut t, q, d) = setup(4);
        let err = mrl_wrap(&mut t, &MrlConfig::new(vec![8, 32]).unwrap(), q, d, nce).unwrap_err();
        assert!(matches!(err, ObjectiveError::Config(_)));
    }

    #[test]
    fn truncation_of_basis_vector() {
        let mut t = Tape::<f64>::new();
        let mut e = vec![0.0; 8];
        e[0] = 1.0;
        let x = t.constant(Tensor::matrix(1, 8, e.clone()).unwrap());
        let h = truncate_rows(&mut t, x, 4).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 0.0, 0.0, 0.0]);
        let full = truncate_rows(&mut t, x, 8).unwrap();
        assert_eq!(t.value(full).data(), e.as_slice());
    }

    #[test]
    fn wrapped_losses_pass_gradient_checks() {
        let cfg = MrlConfig::new(vec![2, 4, 8]).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                ("q".to_string(), randn(&mut rng, 5, 8)),
                ("d".to_string(), randn(&mut rng, 5, 8)),
            ];
            let r = grad_check(
                |t, v| {
                    let q = t.l2_normalize(v[0])?;
                    let d = t.l2_normalize(v[1])?;
                    mrl_wrap(t, &cfg, q, d, nce).map_err(|e| NumericsError::Argument(e.to_string()))
                },
                &inputs,
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(r.passed(), "infonce seed {seed}: {:e}", r.max_rel_err());

            let r = grad_check(
                |t, v| {
                    let q = t.l2_normalize(v[0])?;
                    let d = t.l2_normalize(v[1])?;
                    mrl_wrap(t, &cfg, q, d, |t, q, d| {
                        let b = HardExampleBatch {
                            queries: q,
                            docs: d,
                            positives: (0..5).map(|i| (i, i)).collect(),
                            negatives: (0..5).map(|i| (i, (i + 1) % 5)).collect(),
                        };
                        triplet_nce(t, &b, 0.07)
                    })
                    .map_err(|e| NumericsError::Argument(e.to_string()))
                },
                &inputs,
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(r.passed(), "triplet seed {seed}: {:e}", r.max_rel_err());
        }
    }

    #[test]
    fn earliest_dimensions_receive_the_most_gradient_mass() {
        let cfg = MrlConfig::new(vec![8, 16, 32, 64]).unwrap();
        let mut mass = vec![0.0f64; 64];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::<f64>::new();
            let qr = t.constant(randn(&mut rng, 16, 64));
            let q = t.l2_normalize(qr).unwrap();
            let dr = t.constant(randn(&mut rng, 16, 64));
            let d = t.l2_normalize(dr).unwrap();
            let q = t.param(t.value(q).clone());
            let d = t.constant(t.value(d).clone());
            let l = mrl_wrap(&mut t, &cfg, q, d, nce).unwrap();
            let g = t.backward(l).unwrap().wrt(q).unwrap();
            for r in 0..16 {
                for (c, v) in g.row(r).iter().enumerate() {
                    mass[c] += v * v;
                }
            }
        }
        let early: f64 = mass[..8].iter().sum::<f64>() / 8.0;
        let late: f64 = mass[32..].iter().sum::<f64>() / 32.0;
        assert!(early >= late, "early {early} late {late}");
    }
}
