//! Adam optimizer with an L2 weight penalty.
//!
//! The penalty term is `l2_coeff * sum(w^2)` over kernels, so its gradient
//! contribution is `2 * l2_coeff * w`, added before the moment updates.
//! Frozen parameters are skipped entirely and stay bitwise unchanged.

use super::graph::{Model, ParamKind};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    params: AdamParams,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model, params: AdamParams) -> Adam {
        let m = model
            .params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        let v = model
            .params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        Adam {
            params,
            m,
            v,
            t: 0,
        }
    }

    /// One update from the gradients currently accumulated in the model.
    pub fn step(&mut self, model: &mut Model, lr: f64, l2_coeff: f64) {
        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let eps = self.params.eps;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in model.params.iter_mut().enumerate() {
            if !p.trainable || !p.is_weight() {
                continue;
            }
            let l2_grad = if p.kind == ParamKind::Kernel && l2_coeff > 0.0 {
                2.0 * l2_coeff
            } else {
                0.0
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = p.value.as_slice_mut().expect("contiguous param");
            let grad = p.grad.as_slice().expect("contiguous grad");
            let ms = m.as_slice_mut().expect("contiguous m");
            let vs = v.as_slice_mut().expect("contiguous v");
            for j in 0..value.len() {
                let g = grad[j] as f64 + l2_grad * value[j] as f64;
                let mj = b1 * ms[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * vs[j] as f64 + (1.0 - b2) * g * g;
                ms[j] = mj as f32;
                vs[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                value[j] = (value[j] as f64 - update) as f32;
            }
        }
    }
}
