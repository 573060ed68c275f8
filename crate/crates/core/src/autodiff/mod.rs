//! Minimal reverse-mode differentiation over dense rank-≤2 tensors.
//!
//! A [`Tape`] records primitives in evaluation order together with whatever
//! each backward rule needs. The same code runs in `f32` for training and in
//! `f64` for finite-difference checking ([`grad_check`]).

mod adam;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments, ParamUpdate};
pub use gradcheck::{check_gradients, grad_check, rel_err, GradCheckConfig, GradCheckReport, ParamGradError};
pub use real::Real;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{SparseRows, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
        ts.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect()
    }

    /// Reduces an arbitrary tensor to a scalar through fixed random weights so
    /// every output element carries a distinct gradient.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let shape = tape.value(y).shape().to_vec();
        let w = tape.constant(randn(&mut rng, shape));
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    fn assert_fd<F>(name: &str, f: F, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
    {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = named(make(&mut rng));
            let report = grad_check(
                |t, v| f(t, v),
                &inputs,
                GradCheckConfig {
                    tol: 1e-5,
                    ..GradCheckConfig::default()
                },
            )
            .unwrap();
            assert!(
                report.passed(),
                "{name} seed {seed}: max rel err {:e}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn gelu_at_origin() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![0.0]));
        let y = t.gelu(x);
        assert_eq!(t.value(y).item(), 0.0);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!((g.wrt(x).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_yields_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let x = t.param(randn(&mut rng, vec![5, 7]));
        let y = t.l2_normalize(x).unwrap();
        for r in 0..5 {
            let n: f64 = t.value(y).row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(t.matmul(a, b), Err(NumericsError::Shape(_))));
        let c = t.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(t.add(a, c), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn layer_norm_on_constant_row_is_finite() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::matrix(1, 4, vec![2.0; 4]).unwrap());
        let g = t.param(Tensor::vector(vec![1.0; 4]));
        let b = t.param(Tensor::vector(vec![0.5; 4]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let s = t.sum(y);
        let grads = t.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().is_finite());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_unbiased() {
        let mut t = Tape::<f64>::eval();
        let x = t.constant(Tensor::vector(vec![1.5; 8]));
        let y = t.dropout(x, 0.9, 1).unwrap();
        assert_eq!(x, y);

        // Monte-Carlo mean of inverted dropout over n draws: mean 1, variance (1-p)/p/n.
        let n = 200_000;
        let keep = 0.9;
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::vector(vec![1.0; n]));
        let y = t.dropout(x, keep, 42).unwrap();
        let mean = t.value(y).data().iter().sum::<f64>() / n as f64;
        let sigma = ((1.0 - keep) / keep / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut t = Tape::<f32>::new();
            let a = t.param(randn(&mut rng, vec![6, 5]).cast());
            let b = t.param(randn(&mut rng, vec![5, 4]).cast());
            let c = t.matmul(a, b).unwrap();
            let d = t.gelu(c);
            let e = t.l2_normalize(d).unwrap();
            let s = t.sum(e);
            let g = t.backward(s).unwrap();
            (g.wrt(a).unwrap(), g.wrt(b).unwrap())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn fd_matmul_transpose() {
        assert_fd(
            "matmul",
            |t, v| {
                let bt = t.transpose(v[1])?;
                let y = t.matmul(v[0], bt)?;
                project(t, y, 1)
            },
            |r| vec![randn(r, vec![4, 3]), randn(r, vec![5, 3])],
        );
    }

    #[test]
    fn fd_add_sub_mul_row() {
        assert_fd(
            "elementwise",
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.mul(a, v[1])?;
                let c = t.sub(b, v[0])?;
                let d = t.add_row(c, v[2])?;
                let e = t.scale(d, 0.3);
                let f = t.add_const(e, 2.0);
                project(t, f, 2)
            },
            |r| vec![randn(r, vec![3, 4]), randn(r, vec![3, 4]), randn(r, vec![4])],
        );
    }

    #[test]
    fn fd_exp_gelu_tanh_log_sigmoid() {
        assert_fd(
            "pointwise",
            |t, v| {
                let a = t.gelu(v[0]);
                let b = t.tanh(a);
                let c = t.log_sigmoid(b);
                let d = t.scale(v[0], 0.5);
                let e = t.exp(d);
                let f = t.add(c, e)?;
                project(t, f, 3)
            },
            |r| vec![randn(r, vec![4, 5])],
        );
    }

    #[test]
    fn fd_layer_norm() {
        assert_fd(
            "layer_norm",
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, 4)
            },
            |r| vec![randn(r, vec![3, 6]), randn(r, vec![6]), randn(r, vec![6])],
        );
    }

    #[test]
    fn fd_dropout_fixed_mask() {
        assert_fd(
            "dropout",
            |t, v| {
                let y = t.dropout(v[0], 0.7, 99)?;
                project(t, y, 5)
            },
            |r| vec![randn(r, vec![4, 4])],
        );
    }

    #[test]
    fn fd_l2_normalize_concat_slice_gather() {
        assert_fd(
            "structural",
            |t, v| {
                let c = t.concat(&[v[0], v[1]])?;
                let s = t.slice_cols(c, 1, 6)?;
                let n = t.l2_normalize(s)?;
                let g = t.gather_rows(n, &[2, 0, 0, 1])?;
                let r = t.sum_rows(g)?;
                project(t, r, 6)
            },
            |r| vec![randn(r, vec![3, 4]), randn(r, vec![3, 3])],
        );
    }

    #[test]
    fn fd_scalar_broadcast_and_reductions() {
        assert_fd(
            "scalar",
            |t, v| {
                let a = t.mul_scalar(v[0], v[1])?;
                let b = t.add_scalar(a, v[2])?;
                let c = t.log_sigmoid(b);
                let r = t.reshape(c, vec![12])?;
                let m = t.mean(r)?;
                let s = t.sum(v[0]);
                let s = t.scale(s, 0.01);
                let out = t.add(m, s)?;
                Ok(out)
            },
            |r| vec![randn(r, vec![3, 4]), randn(r, vec![1]), randn(r, vec![1])],
        );
    }

    #[test]
    fn fd_softmax_cross_entropy() {
        assert_fd(
            "cross_entropy",
            |t, v| t.softmax_cross_entropy_rows(v[0], &[0, 3, 1, 1], Some(&[1.0, 0.5, 2.0, 0.25])),
            |r| vec![randn(r, vec![4, 5])],
        );
    }

    #[test]
    fn fd_embedding_bag() {
        let mut rows = SparseRows::new(10);
        rows.push_row([(1u32, 0.5), (7, 1.0)]);
        rows.push_row([(3u32, -0.25), (1, 2.0), (9, 0.7)]);
        rows.push_row([]);
        let rows = Arc::new(rows);
        assert_fd(
            "embedding_bag",
            move |t, v| {
                let y = t.embedding_bag(v[0], rows.clone())?;
                let g = t.gelu(y);
                project(t, g, 7)
            },
            |r| vec![randn(r, vec![10, 4])],
        );
    }

    #[test]
    fn sum_of_inputs_has_exact_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = named(vec![randn(&mut rng, vec![3, 3])]);
        let report = grad_check(|t, v| Ok(t.sum(v[0])), &inputs, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err() < 1e-10);
    }

    #[test]
    fn wrong_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, vec![8]);
        // analytic gradient of sum(x^2) deliberately off by a factor of one half
        let wrong: Vec<f64> = x.data().to_vec();
        let inputs = named(vec![x]);
        let report = check_gradients(
            &inputs,
            &[wrong],
            |v| v[0].data().iter().map(|a| a * a).sum(),
            GradCheckConfig::default(),
        );
        assert!(!report.passed());
        assert!(report.max_rel_err() > 0.4);
    }
}
