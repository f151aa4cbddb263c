use super::TrainConfig;
use crate::params::ParamStore;

/// Linear warmup to `base_lr` over the first `warmup` steps
/// (`base_lr·(step+1)/warmup`), then half-cosine decay to zero at
/// `total_steps`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup();
    let total = cfg.total_steps;
    if step < warmup {
        return cfg.base_lr * (step + 1) as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum and L2 decay folded into the gradient:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies one update from each tensor's stored gradient; a tensor
    /// without a gradient is treated as having a zero one.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for ((_, t), v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = t.grad().map(<[f64]>::to_vec);
            let w = t.data_mut();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + g + self.weight_decay * w[i];
                w[i] -= lr * v[i];
            }
        }
    }
}
