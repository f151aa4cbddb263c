use serde::{Deserialize, Serialize};

use crate::data::AugmentFlags;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Images per identity in a batch (`K` of the `P×K` sampler).
    pub instances_per_id: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub total_steps: usize,
    /// Defaults to a tenth of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub triplet: bool,
    pub triplet_margin: f64,
    pub augment: AugmentFlags,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 48,
            instances_per_id: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.008,
            total_steps: 300,
            warmup_steps: None,
            triplet: true,
            triplet_margin: 0.3,
            augment: AugmentFlags::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 10)
    }

    /// Identities per batch.
    pub fn ids_per_batch(&self) -> usize {
        self.batch_size / self.instances_per_id.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.instances_per_id == 0 || !self.batch_size.is_multiple_of(self.instances_per_id) {
            return bad(
                "instances_per_id",
                format!("{} must be positive and divide batch_size {}", self.instances_per_id, self.batch_size),
            );
        }
        if self.triplet && (self.ids_per_batch() < 2 || self.instances_per_id < 2) {
            return bad("batch_size", "triplet loss needs at least 2 identities with 2 images each per batch".into());
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr", format!("must be finite and positive, got {}", self.base_lr));
        }
        if self.warmup() > self.total_steps {
            return bad("warmup_steps", format!("{} exceeds total_steps {}", self.warmup(), self.total_steps));
        }
        if !(self.triplet_margin.is_finite() && self.triplet_margin >= 0.0) {
            return bad("triplet_margin", format!("must be finite and non-negative, got {}", self.triplet_margin));
        }
        Ok(())
    }
}
