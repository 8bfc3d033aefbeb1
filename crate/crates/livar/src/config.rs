//! Experiment configuration: JSON with flat keys mirroring the CLI flags.

use std::path::{Path, PathBuf};

use livar_core::calibration::ProxyConfig;
use livar_core::fed::{Strategy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub beta: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub num_layers: usize,
    pub hidden_width: usize,
    pub rank: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    /// Coefficient table JSON; the built-in table when absent.
    pub table: Option<PathBuf>,
    pub dump_alphas: bool,
    pub parallel_clients: bool,
    /// Seeds per ablation cell, starting at `seed`.
    pub num_seeds: usize,
    pub proxy_clients: usize,
    pub proxy_per_class: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_clients: 10,
            beta: 0.5,
            rounds: 5,
            local_epochs: 5,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
            strategy: Strategy::Livar,
            num_layers: 4,
            hidden_width: 32,
            rank: 4,
            num_classes: 10,
            input_dim: 16,
            train_per_class: 100,
            test_per_class: 50,
            spread: 1.0,
            table: None,
            dump_alphas: false,
            parallel_clients: false,
            num_seeds: 10,
            proxy_clients: 5,
            proxy_per_class: 60,
        }
    }
}

fn bad(field: &'static str, reason: &str) -> Error {
    Error::Config {
        field,
        reason: reason.to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "config",
            reason: format!("{}: {e}", path.display()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clients", self.num_clients),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("num_layers", self.num_layers),
            ("hidden_width", self.hidden_width),
            ("rank", self.rank),
            ("input_dim", self.input_dim),
            ("test_per_class", self.test_per_class),
            ("num_seeds", self.num_seeds),
            ("proxy_clients", self.proxy_clients),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(bad(field, "must be positive"));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(bad("beta", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(bad("spread", "must be non-negative"));
        }
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least two classes"));
        }
        if self.train_per_class < 2 {
            return Err(bad("train_per_class", "need at least two samples per class"));
        }
        if self.proxy_per_class < 2 {
            return Err(bad("proxy_per_class", "need at least two samples per class"));
        }
        if self.rank >= self.hidden_width.min(self.input_dim) {
            return Err(bad("rank", "must be below every layer width"));
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            rank: self.rank,
        }
    }

    /// `[input, hidden × num_layers]`; the last width is the feature size.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(std::iter::repeat_n(self.hidden_width, self.num_layers))
            .collect()
    }

    pub fn proxy(&self) -> ProxyConfig {
        ProxyConfig {
            clients: self.proxy_clients,
            beta: self.beta,
            num_classes: self.num_classes,
            dim: self.input_dim,
            per_class: self.proxy_per_class,
            spread: self.spread,
            hidden: vec![self.hidden_width; self.num_layers],
            train: self.train(),
            seed: self.seed,
        }
    }
}
