//! Desk-scale victim, clone and generator architectures.

mod classifier;
mod file;
mod generator;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use steallab_autodiff::Tensor;

pub use classifier::{ClassifierFamily, ClassifierModel, ClassifierSpec, Capacity};
pub use file::{load_classifier, load_generator, save_classifier, save_generator, MODEL_FORMAT_VERSION};
pub use generator::{GeneratorModel, GeneratorSpec, BN_EPS, BN_MOMENTUM};

/// Shape of one model input (or generator output), without the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputKind {
    pub fn numel(&self) -> usize {
        match *self {
            Self::Vector { dim } => dim,
            Self::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Tensor shape of a batch of `n` inputs.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            Self::Vector { dim } => vec![n, dim],
            Self::Image {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
        }
    }

    pub(crate) fn check_batch(&self, x: &Tensor) -> crate::Result<usize> {
        let n = x.shape().first().copied().unwrap_or(0);
        if x.shape() != self.batch_shape(n).as_slice() {
            return Err(steallab_autodiff::AutodiffError::Shape {
                op: "model input",
                detail: format!("expected {:?}, got {:?}", self.batch_shape(n), x.shape()),
            }
            .into());
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// He-uniform initialization: U(−√(6/fan_in), √(6/fan_in)).
pub(crate) fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape product matches")
}
