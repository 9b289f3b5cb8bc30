use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices and tables only; biases and norm scales are exempt.
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub bias_correction: bool,
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            peak_lr: 1e-3,
            bias_correction: false,
            total_steps: 1000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("optimizer.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("optimizer.eps must be positive, got {}", self.eps));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            problems.push(format!("optimizer.peak_lr must be finite and non-negative, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("optimizer.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.total_steps == 0 {
            problems.push("optimizer.total_steps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        warmup_steps(self.total_steps)
    }
}

/// `min(10⁴, ⌊0.1 · total⌋)`.
pub fn warmup_steps(total_steps: u64) -> u64 {
    (total_steps / 10).min(10_000)
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, peak: f64, total_steps: u64) -> f64 {
    let warmup = warmup_steps(total_steps);
    if step >= total_steps {
        0.0
    } else if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else {
        peak * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

/// Optimizer step counter and moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    decays: Vec<bool>,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        TrainState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            decays: store.iter().map(|(_, p)| p.tensor.rank() >= 2).collect(),
        }
    }

    pub fn decays(&self, index: usize) -> bool {
        self.decays[index]
    }
}

/// One AdamW update at learning rate `lr`.
///
/// Gradients are checked before anything is modified, so a NaN leaves both
/// the parameters and the state untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut TrainState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let next = state.step + 1;
    for id in store.ids() {
        if grads.get(id).iter().any(|g| g.is_nan()) {
            return Err(Error::NanGradient {
                step: next as usize,
                param: store.name(id).to_string(),
            });
        }
    }
    state.step = next;
    let t = next as i32;
    let (c1, c2) = if config.bias_correction {
        (1.0 - config.beta1.powi(t), 1.0 - config.beta2.powi(t))
    } else {
        (1.0, 1.0)
    };
    let precision = store.precision();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let decay = if state.decays[i] { config.weight_decay } else { 0.0 };
        let g = grads.get(id);
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let w = store.data_mut(id);
        for j in 0..w.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + config.eps);
            w[j] -= lr * (update + decay * w[j]);
        }
        precision.round_all(w);
    }
    Ok(())
}
