//! Standard-library companion to `livar-core`: snapshot, dataset, table and
//! metrics files, a rayon client executor, and the experiment drivers behind
//! the `livar` binary.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod parallel;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
