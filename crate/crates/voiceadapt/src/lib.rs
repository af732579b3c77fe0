//! Batched multi-speaker low-rank adaptation of a toy diffusion score model.
//!
//! The library trains per-speaker low-rank adapters (optionally sharing the
//! up-projection across speakers, optionally with a per-speaker column-norm
//! scale matrix) against a frozen pretrained score network, in a single
//! batched pass whose per-speaker results match independent sequential runs.
//!
//! Numeric kernels are generic over the scalar type; the crate-level aliases
//! fix f64 for everything the higher-level modules and the CLI touch.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod scorenet;
pub mod streams;
pub mod tensor;
pub mod toytask;
pub mod trainer;

pub use error::{Error, Result};

/// Default-precision tensor used by the model, trainer and CLI.
pub type Tensor = tensor::TensorBase<f64>;
/// Default-precision noise schedule.
pub type Schedule = diffusion::NoiseSchedule<f64>;
/// Default-precision Adam state.
pub type Adam = optim::AdamState<f64>;
