use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, PkSampler, Sgd, TrainConfig};
use crate::autodiff::Tape;
use crate::data::{augment, channel_mean, stack_images, DatasetRecord};
use crate::error::{Error, Result};
use crate::model::PftModel;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_per_head: Vec<f64>,
}

/// Dense class indices in ascending `person_id` order, and the class count.
pub fn dense_labels(records: &[DatasetRecord]) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = records.iter().map(|r| r.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let labels = records.iter().map(|r| ids.binary_search(&r.person_id).expect("id present")).collect();
    (labels, ids.len())
}

/// Runs `cfg.total_steps` updates on `model`, calling `on_step` after each.
/// A non-finite loss or gradient aborts with [`Error::Divergence`].
pub fn train(
    model: &mut PftModel,
    records: &[DatasetRecord],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (labels, classes) = dense_labels(records);
    if classes != model.num_ids() {
        return Err(Error::Config(format!(
            "model has {} identity classes but the training set has {classes}",
            model.num_ids()
        )));
    }
    let fill = channel_mean(records);
    let sampler = PkSampler::new(&labels, cfg.ids_per_batch(), cfg.instances_per_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let margin = cfg.triplet.then_some(cfg.triplet_margin);
    let mut logs = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let batch = sampler.sample(&mut rng);
        let augmented: Vec<DatasetRecord> =
            batch.iter().map(|&i| augment(&records[i], &mut rng, cfg.augment, &fill)).collect();
        let images = stack_images(augmented.iter().map(|r| &r.image))?;
        let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

        let mut tape = Tape::new();
        let bind = model.params().bind(&mut tape, true);
        let fwd = model.forward(&mut tape, &bind, &images)?;
        let loss = model.loss(&mut tape, &bind, &fwd, &batch_labels, margin)?;
        let value = tape.value(loss.total).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut grads = tape.backward(loss.total)?;
        model.params_mut().load_grads(&bind, &mut grads);
        if model.params().iter().any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::Divergence { step });
        }
        let lr = cosine_lr(step, cfg);
        opt.step(model.params_mut(), lr);

        let log = StepLog {
            step,
            lr,
            loss: value,
            loss_per_head: loss.per_head.iter().map(|&v| tape.value(v).data()[0]).collect(),
        };
        on_step(&log)?;
        logs.push(log);
    }
    Ok(logs)
}
