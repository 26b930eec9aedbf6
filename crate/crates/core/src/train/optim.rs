//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::model::decays;
use crate::tensor::ParameterStore;

use super::TrainError;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate λ; applied as `θ ← θ·(1 − lr·λ)` before the
    /// moment update, and only to matrices outside embeddings.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: Some(1.0) }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(TrainError::Config("eps must be positive and decay non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config("clip norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter plus the step count
/// used for bias correction.
pub struct AdamW {
    pub cfg: AdamWConfig,
    steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self { cfg, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over every parameter in `store` using the gradients left
    /// by the latest backward pass (a missing gradient counts as zero).
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &ParameterStore, lr: f64) -> Result<f64, TrainError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(TrainError::Config(format!("learning rate {lr} is invalid")));
        }
        let grads: Vec<(String, Option<Vec<f64>>)> =
            store.iter().map(|(name, t)| (name.to_string(), t.grad())).collect();
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter().flat_map(|v| v.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Config(format!("gradient norm {norm} is not finite")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.steps += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.steps as i32);

        for (name, grad) in grads {
            let tensor = store.expect(&name);
            let n = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(TrainError::Config(format!(
                    "optimizer state for {name} has {} entries, parameter has {n}",
                    m.len()
                )));
            }
            let mut theta = tensor.to_vec();
            let decay_here = self.cfg.weight_decay > 0.0 && decays(&name, tensor.rank());
            if decay_here {
                let keep = 1.0 - lr * self.cfg.weight_decay;
                for x in theta.iter_mut() {
                    *x *= keep;
                }
            }
            if let Some(g) = grad {
                for i in 0..n {
                    let gi = g[i] * scale;
                    m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                    v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                    theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                }
            } else {
                // Zero gradient still advances the moment decay.
                for i in 0..n {
                    m[i] *= self.cfg.beta1;
                    v[i] *= self.cfg.beta2;
                    theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                }
            }
            tensor.set_data(theta)?;
        }
        Ok(norm)
    }

    /// Moment vectors for checkpointing, keyed by parameter name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Vec<f64>, &Vec<f64>)> {
        self.m.iter().map(|(name, m)| (name.as_str(), m, &self.v[name]))
    }

    /// Restores moments (the inverse of `moments`); `steps` resumes bias
    /// correction exactly where it left off.
    pub fn restore(
        cfg: AdamWConfig,
        steps: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if m.len() != v.len() || m.keys().ne(v.keys()) {
            return Err(TrainError::Config("first/second moment names disagree".into()));
        }
        Ok(Self { cfg, steps, m, v })
    }
}
