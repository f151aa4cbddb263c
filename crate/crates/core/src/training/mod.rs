//! Optimization: configuration, schedule, optimizer, identity-balanced
//! sampling and the training loop.

mod config;
mod optim;
mod sampler;
mod trainer;

pub use config::TrainConfig;
pub use optim::{cosine_lr, Sgd};
pub use sampler::PkSampler;
pub use trainer::{dense_labels, train, StepLog};
