use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, CnnModel, TrainingPatch};
use crate::error::{Error, Result};
use crate::imageio::Patch;

/// Mini-batch SGD with classical momentum at a constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Trains the standard architecture.
pub fn train_cnn(data: &[TrainingPatch], schedule: &Schedule, seed: u64) -> Result<CnnModel> {
    train_cnn_with(Architecture::standard(), data, schedule, seed)
}

/// Trains a network of the given widths. The run is a pure function of
/// `(data, schedule, seed)`; the recorded final loss is the mean batch loss
/// of the last epoch.
pub fn train_cnn_with(
    arch: Architecture,
    data: &[TrainingPatch],
    schedule: &Schedule,
    seed: u64,
) -> Result<CnnModel> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training patches".into()));
    }
    let mut model = CnnModel::init(arch, seed);
    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = f64::NAN;
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(schedule.batch_size).enumerate() {
            let patches: Vec<&Patch> = batch.iter().map(|&i| &data[i].patch).collect();
            let targets: Vec<&[f64]> = batch.iter().map(|&i| data[i].target.as_slice()).collect();
            let (loss, grads) = model.loss_and_gradients(&patches, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            sum += loss * batch.len() as f64;
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = schedule.momentum * *v + g;
                    *w -= schedule.learning_rate * *v;
                }
            }
            if model.params.iter().flatten().any(|w| !w.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
        }
        epoch_loss = sum / data.len() as f64;
        log::info!(
            "cnn epoch {}/{}: loss {epoch_loss:.5}",
            epoch + 1,
            schedule.epochs
        );
    }
    model.meta.schedule = *schedule;
    model.meta.final_loss = epoch_loss;
    Ok(model)
}
