//! Bias-corrected first-order optimizer state.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators plus a step counter.
pub struct OptimState {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f32 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    /// One Adam update over all parameter groups. A non-finite gradient
    /// rejects the whole update.
    pub fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "param/grad group count mismatch");
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(params[i].shape(), g.shape(), "param/grad shape mismatch in group {}", i);
            if !g.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite gradient in parameter group {}; update rejected",
                    i
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1 as f64;
        let b2 = self.cfg.beta2 as f64;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let lr = self.cfg.lr as f64;
        let eps = self.cfg.epsilon as f64;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j] as f64;
                let mj = b1 * md[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * vd[j] as f64 + (1.0 - b2) * gj * gj;
                md[j] = mj as f32;
                vd[j] = vj as f32;
                let mhat = mj / bias1;
                let vhat = vj / bias2;
                pd[j] = (pd[j] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}
