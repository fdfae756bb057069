//! AdamW: bias-corrected Adam moments plus decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub params: AdamWParams,
    pub step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(params: AdamWParams, shapes: &[Vec<usize>]) -> Self {
        let moments = shapes
            .iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .collect();
        Self { params, step: 0, moments }
    }

    pub fn moments(&self) -> &[(Tensor, Tensor)] {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut Vec<(Tensor, Tensor)> {
        &mut self.moments
    }

    /// One AdamW step over all parameter tensors. `lr` overrides the base
    /// learning rate (for schedules); decay is applied outside the moment
    /// update as `p <- p - lr*wd*p`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        let t = self.step as f64;
        let p = &self.params;
        let bc1 = 1.0 - p.beta1.powf(t);
        let bc2 = 1.0 - p.beta2.powf(t);
        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            assert_eq!(param.shape(), grad.shape(), "param/grad shape mismatch");
            for i in 0..param.size() {
                let g = grad.data()[i];
                let mi = p.beta1 * m.data()[i] + (1.0 - p.beta1) * g;
                let vi = p.beta2 * v.data()[i] + (1.0 - p.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let x = param.data()[i];
                param.data_mut()[i] =
                    x - lr * mhat / (vhat.sqrt() + p.eps) - lr * p.weight_decay * x;
            }
        }
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    total
}
