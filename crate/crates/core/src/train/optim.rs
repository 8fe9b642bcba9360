use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Optimizer(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Optimizer(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Optimizer(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Optimizer(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub settings: AdamWSettings,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Tensor], settings: AdamWSettings) -> Result<Self> {
        settings.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            settings,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// `w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Optimizer(format!(
                "optimizer holds {} moments but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Optimizer(format!(
                    "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let s = self.settings;
        let t = self.step as i32;
        let c1 = 1.0 - s.beta1.powi(t);
        let c2 = 1.0 - s.beta2.powi(t);
        let decay = 1.0 - s.lr * s.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = s.beta1 * md[j] + (1.0 - s.beta1) * gj;
                vd[j] = s.beta2 * vd[j] + (1.0 - s.beta2) * gj * gj;
                let m_hat = md[j] / c1;
                let v_hat = vd[j] / c2;
                pd[j] = pd[j] * decay - s.lr * m_hat / (v_hat.sqrt() + s.eps);
            }
        }
        Ok(())
    }
}
