//! Decoupled-weight-decay adaptive-moment descent, global-norm gradient
//! clipping, and the linear-warmup-then-cosine learning-rate schedule.

use std::collections::HashMap;

use crate::error::Result;
use crate::nn::Params;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    /// One optimizer step over every parameter; `lr_scale` applies the
    /// schedule. Gradients are left untouched (call `zero_grads` after).
    pub fn step(&mut self, model: &mut dyn Params, lr_scale: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.lr * lr_scale;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        let mut failure: Option<String> = None;
        model.visit_params("", &mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let n = tensor.numel();
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let Some(grad) = tensor.grad() else { return };
            let grad = grad.to_vec();
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
            }
            if let Err(e) = tensor.validate_finite(name) {
                failure = Some(e.to_string());
            }
        });
        match failure {
            Some(msg) => Err(crate::error::Error::numeric(msg)),
            None => Ok(()),
        }
    }
}

pub fn zero_grads(model: &mut dyn Params) {
    model.visit_params("", &mut |_, t| t.zero_grad());
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(model: &mut dyn Params, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        model.visit_params("", &mut |_, t| {
            let g = t.grad_mut();
            g.iter_mut().for_each(|v| *v *= scale);
        });
    }
    norm
}

/// Linear warmup to 1, then cosine decay to `min_factor` over the rest.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, min_factor: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let progress = progress.clamp(0.0, 1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    min_factor + (1.0 - min_factor) * cos
}

/// Records which parameters have ever received a nonzero gradient; the
/// dead-parameter check reports any that never did.
#[derive(Debug, Default, Clone)]
pub struct GradCoverage {
    seen: std::collections::BTreeMap<String, bool>,
}

impl GradCoverage {
    pub fn record(&mut self, model: &mut dyn Params) {
        model.visit_params("", &mut |name, t| {
            let hit = t.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0));
            let entry = self.seen.entry(name.to_string()).or_insert(false);
            *entry |= hit;
        });
    }

    pub fn dead_params(&self) -> Vec<String> {
        self.seen
            .iter()
            .filter(|(_, hit)| !**hit)
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
