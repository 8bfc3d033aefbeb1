use alloc::boxed::Box;

use crate::linalg::NnlsSolution;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: &'static str },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("adapter rank {rank} must satisfy 1 <= rank < min({d}, {k})")]
    RankOutOfRange { rank: usize, d: usize, k: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("nnls did not converge within {iterations} iterations (residual {})", best.residual_norm)]
    NnlsNotConverged { iterations: usize, best: Box<NnlsSolution> },
    #[error("could not give every client a sample after {retries} Dirichlet draws; use more data or a larger beta")]
    PartitionFailed { retries: usize },
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(&'static str),
}
