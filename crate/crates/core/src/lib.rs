//! Adversarial training and indirect gradient distillation on a small
//! reverse-mode differentiation engine.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line runner and wall-clock timing live in the companion `igdm-lab` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attack;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{init_mlp, Activation, Architecture, Mlp, ParamSet};
pub use tape::{GradientMap, LeafKind, NodeId, Tape};
pub use tensor::Tensor;
pub use trainer::{run_training, Clock, MetricRecord, TrainConfig, TrainHistory};
