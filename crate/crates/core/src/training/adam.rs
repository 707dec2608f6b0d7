use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{invalid, Result};

/// Adam with bias correction. Moments are kept per parameter name so they
/// can be saved and restored with a checkpoint.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1), got ({beta1}, {beta2})"));
        }
        Ok(Self { lr, beta1, beta2, eps: 1e-8, t: 0, moments: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moments as `{prefix}m.<name>` and `{prefix}v.<name>`.
    pub fn state_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("{prefix}m.{name}"), m.clone());
            out.insert(format!("{prefix}v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, t: u64, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        self.t = t;
        self.moments.clear();
        let m_prefix = format!("{prefix}m.");
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix(&m_prefix) else {
                continue;
            };
            let v = tensors
                .get(&format!("{prefix}v.{name}"))
                .ok_or_else(|| invalid!("optimizer state lacks the second moment of {name}"))?;
            self.moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        Ok(())
    }
}
