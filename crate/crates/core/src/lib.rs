//! Hypernetwork parametrization experiments over a small reverse-mode
//! autodiff core.
//!
//! The library builds multilayer perceptrons whose parameters are predicted
//! by a second network conditioned on a task variable gamma. The default
//! parametrization makes predicted-weight magnitudes scale with gamma; the
//! non-proportional additive parametrization (unit-norm input embedding plus
//! a learned base parameter vector) removes that coupling. Everything runs
//! in f64 on the CPU and is deterministic given a seed.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod hypernet;
pub mod layers;
pub mod norm;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
