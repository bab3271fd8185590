//! AdamW with decoupled weight decay and bias-corrected moments.

use crate::diffmath::tensor::Tensor;
use crate::error::{HpmError, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
/// Accumulator order follows the parameter list handed to `step`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, param_sizes: &[usize]) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all parameters. Weight decay is applied to the
    /// parameter directly (decoupled), before the adaptive term.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(HpmError::Contract(format!("negative learning rate {lr}")));
        }
        if params.len() != self.m.len() {
            return Err(HpmError::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            if self.m[idx].len() != p.numel() {
                return Err(HpmError::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![self.m[idx].len()],
                });
            }
            let grad = p.grad_or_zeros();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.data_mut();
            for i in 0..data.len() {
                data[i] *= 1.0 - lr * c.weight_decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
