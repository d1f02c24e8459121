//! Adaptive-moment optimizer over the parameter store.

use crate::grad::{ParamId, Params, Tape};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 8 }
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    targets: Vec<ParamId>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &Params, cfg: &OptimizerConfig) -> Self {
        let targets = params.trainable_ids();
        let m = targets.iter().map(|t| ArrayD::zeros(params.value(*t).raw_dim())).collect();
        let v = targets.iter().map(|t| ArrayD::zeros(params.value(*t).raw_dim())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            targets,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update from the gradients recorded on `tape`. Parameters that got
    /// no gradient this step are left untouched.
    pub fn step(&mut self, params: &mut Params, tape: &Tape) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = self.lr * bc2.sqrt() / bc1;
        for (i, target) in self.targets.iter().enumerate() {
            let Some(grad) = tape.param_grad(*target) else { continue };
            let mut value = params.value(*target).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let b1 = self.beta1 as f64;
            let b2 = self.beta2 as f64;
            ndarray::Zip::from(&mut value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= (lr_t as f64) * *m / (v.sqrt() + self.eps as f64);
                });
            params.set_value(*target, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Params, Tape};
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (w - 3)^2
        let mut params = Params::new();
        let w = params.insert("w", ArrayD::from_elem(IxDyn(&[1]), 0.0f64), true);
        let mut adam = Adam::new(&params, &OptimizerConfig { lr: 0.1, ..Default::default() });
        for _ in 0..200 {
            let mut tape = Tape::new();
            let wv = tape.param(&params, w);
            let shifted = tape.affine(wv, 1.0, -3.0);
            let sq = tape.mul(shifted, shifted);
            let loss = tape.sum_all(sq);
            tape.backward(loss);
            adam.step(&mut params, &tape);
        }
        let final_w = params.value(w).as_slice().unwrap()[0];
        assert!((final_w - 3.0).abs() < 0.05, "w = {final_w}");
    }
}
