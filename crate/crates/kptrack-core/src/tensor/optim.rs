use std::collections::BTreeMap;

use super::Params;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// and created lazily, so parameters can change trainability between
/// stages without invalidating the state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter. A trainable parameter
    /// with no gradient is a wiring bug and errors by name.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let numel = tensor.numel();
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; numel]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; numel]);
            let data = tensor.data_mut();
            for i in 0..numel {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
