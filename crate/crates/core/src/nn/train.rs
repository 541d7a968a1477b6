use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{cross_entropy, BackwardOptions, Model};
use super::optim::Adam;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, lr: 1e-3, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Train with softmax cross-entropy and Adam; the returned model is frozen.
pub fn train_base(mut model: Model, train: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if model.is_frozen() {
        return Err(Error::Frozen("train_base needs an unfrozen model".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidParam(format!("bad training config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::for_target(cfg.lr, &model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let trace = model.forward(&x, true)?;
            let (loss, g) = cross_entropy(&trace.logits, &y)?;
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(trace.probs.data(), trace.probs.row_len(), &y);
            let grads = model.backward(&trace, Some(&g), &[], BackwardOptions { params: true, output_grads: false })?;
            opt.step(&mut model, &grads.params)?;
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        });
    }
    model.freeze();
    Ok((model, history))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn count_correct(probs: &[f64], k: usize, labels: &[usize]) -> usize {
    probs.chunks(k).zip(labels).filter(|(row, &y)| argmax(row) == y).count()
}

/// Fraction of samples whose arg-max prediction matches the label.
pub fn accuracy(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk);
        let trace = model.forward(&x, false)?;
        correct += count_correct(trace.probs.data(), trace.probs.row_len(), &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}
