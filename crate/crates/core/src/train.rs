//! Supervised training of victim classifiers.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use steallab_autodiff::{LrSchedule, Optimizer, OptimizerKind, Tape, Tensor};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::models::ClassifierModel;
use crate::seed::SeedStreams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Mean cross-entropy of `logits` against integer labels, on the tape.
pub fn cross_entropy(tape: &mut Tape, logits: steallab_autodiff::Var, labels: &[usize]) -> Result<steallab_autodiff::Var> {
    let k = tape.value(logits).shape()[1];
    let mut one_hot = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        one_hot[i * k + l] = 1.0;
    }
    let target = tape.constant(Tensor::new(&[labels.len(), k], one_hot)?);
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.mul(target, lsm)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / labels.len() as f64)?)
}

/// Mini-batch SGD with a cosine schedule over epochs; shuffling uses the
/// `victim-train` substream of `seed`.
pub fn fit(model: &mut ClassifierModel, train: &LabeledDataset, test: &LabeledDataset, cfg: &TrainConfig, seed: u64) -> Result<FitReport> {
    cfg.validate()?;
    if train.num_classes != model.num_classes() {
        return Err(Error::config("task.num_classes", "dataset and model class counts differ"));
    }
    let mut rng = SeedStreams::new(seed).rng("victim-train");
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
        cfg.lr,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        opt.set_lr(LrSchedule::Cosine.lr_at(cfg.lr, epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train.inputs.select_rows(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.forward(&mut tape, xv, true)?;
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: "training loss".into(),
                    round: epoch as u64,
                });
            }
            total += value * batch.len() as f64;
            tape.backward(loss)?.accumulate_into(model.params_mut());
            opt.step(model.params_mut())?;
        }
        final_loss = total / train.len() as f64;
        info!("epoch {}/{} loss {final_loss:.5}", epoch + 1, cfg.epochs);
    }
    Ok(FitReport {
        final_loss,
        train_accuracy: accuracy(model, &train.inputs, &train.labels)?,
        test_accuracy: accuracy(model, &test.inputs, &test.labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 5]));
        let loss = cross_entropy(&mut tape, l, &[0, 4, 2]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }
}
