//! Temporally-aware GRPO fine-tuning for toy flow-matching models.

// NaN-rejecting guards like `!(x > 0.0)` are deliberate; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod analysis;
pub mod autodiff;
pub mod branching;
pub mod error;
pub mod flowmodel;
pub mod grpo;
pub mod harness;
pub mod rewards;
pub mod rng;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
