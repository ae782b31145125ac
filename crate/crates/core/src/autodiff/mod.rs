//! Reverse-mode differentiation and optimisation for small velocity MLPs.

mod adam;
pub mod checkpoint;
mod network;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, load_for, save_checkpoint};
pub use network::{Activation, Network};
pub use params::{GradSet, ParamEntry, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Mat;
