//! First-order optimizers and learning-rate schedules.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{AutodiffError, Result};
use crate::param::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        Self::Sgd {
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: kind, current learning rate and per-parameter buffers.
///
/// For SGD `first` holds the velocity and `second` stays empty.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    buffers: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AutodiffError::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            step_count: 0,
            buffers: HashMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable parameter and clears the grads.
    ///
    /// Fails without touching anything if a trainable parameter has no grad.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(AutodiffError::MissingGrad(p.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for p in params.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.take().expect("checked above");
            let n = p.tensor.len();
            let buf = self.buffers.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: Vec::new(),
            });
            let values = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    for ((w, g), v) in values.iter_mut().zip(grad.data()).zip(&mut buf.first) {
                        let g = g + weight_decay * *w;
                        *v = momentum * *v + g;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    if buf.second.is_empty() {
                        buf.second = vec![0.0; n];
                    }
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in values
                        .iter_mut()
                        .zip(grad.data())
                        .zip(&mut buf.first)
                        .zip(&mut buf.second)
                    {
                        let g = g + weight_decay * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` each time progress passes a milestone fraction.
    Milestones { milestones: Vec<f64>, factor: f64 },
    Cosine,
}

impl LrSchedule {
    /// The learning-rate decay used for both attack optimizers: ×0.3 at 10%, 30%, 50%.
    pub fn attack_default() -> Self {
        Self::Milestones {
            milestones: vec![0.1, 0.3, 0.5],
            factor: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Milestones { milestones, factor } = self {
            if !(*factor > 0.0) {
                return Err(AutodiffError::Config(format!("schedule factor must be positive, got {factor}")));
            }
            let mut prev = 0.0;
            for &m in milestones {
                if !(m > prev && m < 1.0) {
                    return Err(AutodiffError::Config(format!(
                        "milestones must be strictly increasing in (0, 1): {milestones:?}"
                    )));
                }
                prev = m;
            }
        }
        Ok(())
    }

    /// Learning rate after `step` of `total` steps have completed.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let progress = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        match self {
            Self::Constant => base,
            Self::Milestones { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| progress >= m).count();
                base * factor.powi(passed as i32)
            }
            Self::Cosine => base * 0.5 * (1.0 + (PI * progress.min(1.0)).cos()),
        }
    }
}
