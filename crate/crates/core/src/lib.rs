//! Federated aggregation engine for LoRA-adapted models.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical
//! piece of the pipeline: dense matrices and an NNLS solver, LoRA adapters
//! with importance accumulators, a small classification network with manual
//! backpropagation, synthetic data with Dirichlet partitioning, the round
//! engine with its aggregation strategies, and the proxy calibration of the
//! coefficient table. File formats, parallel client execution and the
//! command line live in the `livar` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod calibration;
pub mod data;
mod error;
pub mod fed;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::{Matrix, NnlsSolution};
