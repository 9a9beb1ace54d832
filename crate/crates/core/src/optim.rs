//! AdamW with decoupled weight decay and two learning-rate tiers: the
//! ranking MLPs and the decoder head are newly introduced modules and train
//! an order of magnitude faster than the rest of the network.

use std::collections::HashMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One tensor's checkpointable moments: (name, m, v).
pub type MomentEntry = (String, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr_fast: f64,
    pub lr_slow: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: HashMap<String, Slot>,
}

/// Fast tier: any ranking MLP (including the token filter's) and the head.
pub fn is_fast_tier(name: &str) -> bool {
    name.starts_with("head") || name.contains("rank")
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr_fast: cfg.lr_rank_and_head,
            lr_slow: cfg.lr_backbone,
            weight_decay: cfg.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Start one optimizer step (advances the bias-correction clock).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply the AdamW update to one named tensor.
    pub fn update(&mut self, name: &str, value: &mut Tensor, grad: &[f64]) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config("optimizer step before begin_step".into()));
        }
        if grad.len() != value.numel() {
            return Err(Error::shape(
                "adamw",
                format!("{name}: {} grads for {} values", grad.len(), value.numel()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let lr = if is_fast_tier(name) {
            self.lr_fast
        } else {
            self.lr_slow
        };
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let data = value.data_mut();
        for i in 0..grad.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
        Ok(())
    }

    /// Flatten the moment state for checkpointing: (name, m, v) triples in
    /// sorted name order, plus the step counter.
    pub fn export_state(&self) -> (u64, Vec<MomentEntry>) {
        let mut items: Vec<_> = self
            .state
            .iter()
            .map(|(k, s)| (k.clone(), s.m.clone(), s.v.clone()))
            .collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        (self.step, items)
    }

    pub fn import_state(&mut self, step: u64, items: Vec<MomentEntry>) {
        self.step = step;
        self.state = items
            .into_iter()
            .map(|(k, m, v)| (k, Slot { m, v }))
            .collect();
    }
}

/// Linear Gumbel temperature decay from `tau_start` to `tau_end` across the
/// training run (clamped past the end).
pub fn tau_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.steps <= 1 {
        return cfg.tau_end;
    }
    let f = (step as f64 / (cfg.steps - 1) as f64).min(1.0);
    cfg.tau_start + (cfg.tau_end - cfg.tau_start) * f
}
