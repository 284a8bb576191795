use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradient, DropoutSeed, GnnError, GnnModel, ModelGradient, Sample};
use crate::network::RoadNetwork;
use crate::par::Exec;
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Shuffle samples each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 0.01,
            batch_size: 10,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// `θ_after − θ_before`.
    pub update: ModelGradient,
    /// The locally trained model itself.
    pub model: GnnModel,
    /// Mean batch loss over the last epoch, measured before each step.
    pub final_loss: f64,
    pub steps: usize,
}

/// Plain mini-batch SGD on a copy of `model`.
///
/// `seed` drives shuffling and dropout; callers derive it from
/// `(round, client)` so every client gets its own streams.
pub fn local_train(
    model: &GnnModel,
    net: &RoadNetwork,
    data: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<TrainOutcome, GnnError> {
    if data.is_empty() {
        return Err(GnnError::EmptyDataset);
    }
    let mut local = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = 0.0;
    let mut steps = 0;
    let batch_size = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let dropout = DropoutSeed(derive_seed(seed, &[stream::DROPOUT, epoch as u64, b as u64]));
            let (loss, grad) = loss_and_gradient(&local, net, &batch, Some(dropout), exec)?;
            local.params.axpy(-cfg.learning_rate, &grad.params);
            epoch_loss += loss.loss;
            batches += 1;
            steps += 1;
        }
        final_loss = epoch_loss / batches as f64;
    }
    Ok(TrainOutcome {
        update: ModelGradient {
            params: local.params.sub(&model.params),
        },
        model: local,
        final_loss,
        steps,
    })
}
