//! Core of a unified multi-task time-series transformer.
//!
//! Everything here is pure computation over `alloc`: a small reverse-mode
//! autodiff engine, the patch tokenizer and task token layouts, the modified
//! transformer block, the shared GEN/CLS towers, task pipelines, training
//! regimes and deterministic synthetic data. File formats and the command
//! line live in the `units` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod towers;
pub mod trainer;

pub use error::{Error, Result};

pub use model::{Model, ModelConfig};
pub use registry::ParameterRegistry;
pub use tensor::{Scalar, Tape, Tensor, Var};
