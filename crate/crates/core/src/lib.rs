//! Mixture of rank-prefix experts on a single LoRA adapter.
//!
//! A rank-`r` adapter `B·A` is read as `r` nested experts: expert `k` uses the
//! first `k` rows of `A` and columns of `B`. A per-task embedding drives a
//! softmax gate that picks one expert per task and site; a straight-through
//! estimator keeps the hard pick differentiable. Once training ends the
//! task→rank choice can be frozen into a lookup table.
//!
//! The crate contains the pieces needed to train and study that layer on a
//! small CPU transformer: a reverse-mode autodiff engine ([`autograd`]),
//! adapters ([`lora`], [`more`]), objectives, a dataset-size-aware task
//! sampler, a parameter-budget audit and a synthetic benchmark harness.

pub mod audit;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod more;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
