//! Data-free model stealing on desk-scale tasks.
//!
//! A victim classifier is reachable only through a budgeted [`oracle::VictimOracle`].
//! The attack alternates generator steps that push clone posteriors toward
//! diverse predictions and clone steps that match victim pseudo-logits on
//! generated queries.

pub mod attack;
mod codec;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
