use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, Tensor};

/// Adam hyperparameters. Defaults are a fixed learning rate of 5e-5 with no warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// A parameter handed to [`AdamState::step`] together with its gradient.
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamConfig, step: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        Self { config, step, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    pub fn moments_for(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// One bias-corrected Adam update over `params`.
    ///
    /// Every gradient is validated before anything is written, so a non-finite
    /// gradient leaves both parameters and moments untouched.
    pub fn step(&mut self, params: &mut [ParamUpdate<'_, T>]) -> Result<(), NumericsError> {
        for p in params.iter() {
            if p.grad.len() != p.value.len() {
                return Err(NumericsError::Shape(format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    p.name,
                    p.grad.len(),
                    p.value.len()
                )));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(NumericsError::NonFiniteGradient {
                    param: p.name.to_string(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for p in params.iter_mut() {
            let n = p.value.len();
            let mom = self.moments.entry(p.name.to_string()).or_insert_with(|| Moments {
                first: vec![T::ZERO; n],
                second: vec![T::ZERO; n],
            });
            let w = p.value.data_mut();
            for i in 0..n {
                let g = p.grad[i];
                let m = b1 * mom.first[i] + ob1 * g;
                let v = b2 * mom.second[i] + ob2 * g * g;
                mom.first[i] = m;
                mom.second[i] = v;
                w[i] -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
