use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Adam moment estimates for gradient *ascent*.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn adam(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Moves every parameter along its ascent direction. Parameters without a
    /// gradient entry are left untouched.
    pub fn ascend(&mut self, params: Vec<(String, &mut Tensor)>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (mi, gi) in m.values_mut().iter_mut().zip(g.values()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.second.entry(name).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (vi, gi) in v.values_mut().iter_mut().zip(g.values()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            for ((pi, mi), vi) in p.values_mut().iter_mut().zip(m.values()).zip(v.values()) {
                *pi += self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.values()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.values_mut() {
                *v *= s;
            }
        }
    }
    norm
}
