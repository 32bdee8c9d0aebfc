// NaN-rejecting guards are written as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod measurement;
pub mod noise;
pub mod oracle;
pub mod sequencer;
pub mod spin;

pub use error::{Error, Result};
