//! Low-rank adapters and their importance accumulators.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::linalg::{frobenius_dot, matmul, Matrix};
use crate::seed;
use crate::{Error, Result};

/// A trainable pair `(A, B)` whose product `B·A` is added to a frozen
/// `d × k` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `rank × k`, Kaiming-uniform at initialization.
    pub a: Matrix,
    /// `d × rank`, zero at initialization.
    pub b: Matrix,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0` and `A ~ U[−√(6/k), √(6/k)]` (fan-in `k`).
    pub fn init(d: usize, k: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= d.min(k) {
            return Err(Error::RankOutOfRange { rank, d, k });
        }
        let bound = kaiming_bound(k);
        let mut rng = seed::rng(seed);
        let a = Matrix::from_fn(rank, k, |_, _| rng.random_range(-bound..=bound))?;
        let b = Matrix::zeros(d, rank)?;
        Ok(LoraAdapter { a, b })
    }

    pub fn from_factors(a: Matrix, b: Matrix) -> Result<Self> {
        let (rank, k) = a.shape();
        let (d, rank_b) = b.shape();
        if rank != rank_b {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::from_factors",
                left: a.shape(),
                right: b.shape(),
            });
        }
        if rank >= d.min(k) {
            return Err(Error::RankOutOfRange { rank, d, k });
        }
        Ok(LoraAdapter { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Shape `(d, k)` of the frozen weight this adapter modifies.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// The materialized update `ΔW = B·A`. Fails only if the product
    /// overflows.
    pub fn delta(&self) -> Result<Matrix> {
        matmul(&self.b, &self.a)
    }

    /// Trainable parameter count `r·(d + k)`.
    pub fn parameter_count(&self) -> usize {
        let (d, k) = self.target_shape();
        self.rank() * (d + k)
    }
}

/// `√(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in as f64)
}

/// Which factor of an adapter an update belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

/// Per-layer running importance of the `A` and `B` factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub omega_a: f64,
    pub omega_b: f64,
    /// 1-based layer index.
    pub layer_index: usize,
}

impl ImportanceRecord {
    pub fn new(layer_index: usize) -> Self {
        ImportanceRecord {
            omega_a: 0.0,
            omega_b: 0.0,
            layer_index,
        }
    }

    /// Adds `−⟨grad, update⟩` to the targeted factor's ω, where `update` is
    /// `θ_after − θ_before` for one optimizer step. The increment is
    /// non-negative for a plain gradient step.
    pub fn accumulate(self, factor: Factor, grad: &Matrix, update: &Matrix) -> Result<Self> {
        let increment = -frobenius_dot(grad, update)?;
        let mut out = self;
        match factor {
            Factor::A => out.omega_a += increment,
            Factor::B => out.omega_b += increment,
        }
        Ok(out)
    }

    /// Same record with both signals multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        ImportanceRecord {
            omega_a: self.omega_a * factor,
            omega_b: self.omega_b * factor,
            ..self
        }
    }
}
