use indexmap::IndexMap;

use crate::error::{shape_err, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay. Decay only touches parameters whose
/// [`ParamKind`](crate::ParamKind) decays (weights and biases).
#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }

    /// One update. Trainable parameters missing from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.tensor(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient for {name}: {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::cast(c.learning_rate);
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let bc1 = T::cast(1.0 - c.beta1.powi(t));
        let bc2 = T::cast(1.0 - c.beta2.powi(t));
        let eps = T::cast(c.eps);
        let decay = T::one() - lr * T::cast(c.weight_decay);
        for (name, param) in params.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()).expect("gradient shape is valid"));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()).expect("gradient shape is valid"));
            let decays = param.kind.decays();
            let p = param.tensor.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                if decays {
                    p[i] *= decay;
                }
                p[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
