//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] walks it once in
//! reverse and returns [`Gradients`] keyed by parameter name. Models own their
//! [`Parameter`]s and bind them onto a fresh tape per step.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use param::Parameter;
pub use tape::{BatchStats, Gradients, Tape, UpsampleMode, Var, LOG_CLAMP};
pub use tensor::{argmax, softmax_row, Tensor};
