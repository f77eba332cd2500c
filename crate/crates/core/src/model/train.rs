use serde::{Deserialize, Serialize};

use super::{Model, ModelWeights};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warm-up to `peak_lr` over `warmup_steps`, then linear decay to
/// zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    /// Rate for 0-based `step`. A zero `total_steps` means no decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 {
            return self.peak_lr;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        self.peak_lr * (self.total_steps - step) as f64 / span
    }
}

/// Adam moment estimates, one slot per model parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: AdamConfig,
    first: ModelWeights,
    second: ModelWeights,
    steps: u64,
}

impl Optimizer {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        Optimizer {
            config,
            first: model.weights.zeros_like(),
            second: model.weights.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn update(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let params = weights.slots_mut();
        let grads = grads.slots();
        let firsts = self.first.slots_mut();
        let seconds = self.second.slots_mut();
        for (((w, g), m), v) in params.into_iter().zip(grads).zip(firsts).zip(seconds) {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            }
            if lr == 0.0 {
                continue;
            }
            for (k, wk) in w.data_mut().iter_mut().enumerate() {
                *wk -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// One optimisation step on `batch`: mean cross-entropy over the batch,
/// gradients averaged across examples, Adam update at the scheduled rate.
/// Returns the mean loss before the update.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    schedule: &Schedule,
    batch: &[(Vec<usize>, usize)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("batch", "must contain at least one example"));
    }
    let classes = model.config().num_classes;
    if let Some((_, label)) = batch.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
    }
    let mut total = model.weights.zeros_like();
    let mut loss_sum = 0.0;
    for (ids, label) in batch {
        let (loss, grads) = model.train_loss_and_grads(ids, *label)?;
        if !loss.is_finite() {
            return Err(Error::Data(format!("non-finite loss {loss}")));
        }
        loss_sum += loss;
        add_into(&mut total, &grads);
    }
    let inv = 1.0 / batch.len() as f64;
    total.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|g| *g *= inv));

    let lr = schedule.lr_at(model.step());
    optimizer.update(&mut model.weights, &total, lr);
    model.advance_step();
    Ok(loss_sum * inv)
}

fn add_into(acc: &mut ModelWeights, grads: &ModelWeights) {
    for (a, g) in acc.slots_mut().into_iter().zip(grads.slots()) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}
