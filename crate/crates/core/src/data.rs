//! Synthetic Gaussian-blob datasets and Dirichlet label-skew partitions.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::linalg::Matrix;
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Maximum number of Dirichlet draws before giving up on a partition.
pub const PARTITION_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "dataset labels",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Empty("dataset subset"));
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(Matrix::from_vec(indices.len(), dim, data)?, labels, self.num_classes)
    }

    /// Concatenation of several datasets with the same width and classes.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset concat"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != first.dim() || p.num_classes != first.num_classes {
                return Err(Error::ShapeMismatch {
                    op: "dataset concat",
                    left: first.features.shape(),
                    right: p.features.shape(),
                });
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(
            Matrix::from_vec(labels.len(), first.dim(), data)?,
            labels,
            first.num_classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Class means for a family of isotropic Gaussian blobs. Train and test
/// sets sampled from the same spec share their means.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    /// `num_classes × dim`, one mean per row, entries drawn from `N(0, 1)`.
    pub means: Matrix,
    pub spread: f64,
}

impl BlobSpec {
    pub fn new(num_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter {
                name: "num_classes",
                reason: "need at least two classes",
            });
        }
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "must be positive",
            });
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "spread",
                reason: "must be finite and non-negative",
            });
        }
        let mut rng = seed::rng(seed);
        let means = Matrix::from_fn(num_classes, dim, |_, _| rng.sample(StandardNormal))?;
        Ok(BlobSpec { means, spread })
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    /// `per_class` samples of every class, class-major order.
    pub fn sample(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        if per_class < 2 {
            return Err(Error::InvalidParameter {
                name: "per_class",
                reason: "need at least two samples per class",
            });
        }
        let (classes, dim) = self.means.shape();
        let mut rng = seed::rng(seed);
        let mut data = Vec::with_capacity(classes * per_class * dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for c in 0..classes {
            for _ in 0..per_class {
                for &m in self.means.row(c) {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(m + self.spread * z);
                }
                labels.push(c);
            }
        }
        Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, classes)
    }
}

/// Seeded blobs: class means from `N(0, I)`, samples `mean + spread·N(0, I)`.
pub fn make_blobs(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    BlobSpec::new(num_classes, dim, spread, seed)?.sample(per_class, seed::derive(seed, &[stream::DATA]))
}

/// Train and test sets drawn around the same class means.
pub fn make_blobs_split(
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let spec = BlobSpec::new(num_classes, dim, spread, seed)?;
    Ok((
        spec.sample(train_per_class, seed::derive(seed, &[stream::DATA]))?,
        spec.sample(test_per_class, seed::derive(seed, &[stream::TEST_DATA]))?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Ascending sample indices per client.
    pub client_indices: Vec<Vec<usize>>,
    pub beta: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// `hist[m][c]` = samples of class `c` held by client `m`.
    pub fn class_histogram(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean over clients of the total-variation distance between the
    /// client's label distribution and the global one.
    pub fn class_skew(&self, labels: &[usize], num_classes: usize) -> f64 {
        let global = proportions(&{
            let mut g = vec![0; num_classes];
            labels.iter().for_each(|&y| g[y] += 1);
            g
        });
        let hist = self.class_histogram(labels, num_classes);
        let total: f64 = hist
            .iter()
            .map(|h| {
                let p = proportions(h);
                0.5 * p.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .sum();
        total / hist.len() as f64
    }

    /// Client datasets in client order.
    pub fn split(&self, data: &Dataset) -> Result<Vec<Dataset>> {
        self.client_indices.iter().map(|idx| data.subset(idx)).collect()
    }
}

fn proportions(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
}

/// Label-skew partition: for every class, proportions `p ~ Dir(β·1_M)` are
/// drawn (as normalized `Gamma(β, 1)` variates) and each sample of the class
/// goes to a client drawn from `p`. The whole draw is repeated until no
/// client is empty.
pub fn dirichlet_partition(labels: &[usize], num_clients: usize, beta: f64, seed: u64) -> Result<Partition> {
    if num_clients < 2 {
        return Err(Error::InvalidParameter {
            name: "num_clients",
            reason: "need at least two clients",
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "beta",
            reason: "must be positive and finite",
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("partition labels"));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|_| Error::InvalidParameter {
        name: "beta",
        reason: "rejected by the Gamma sampler",
    })?;
    let mut rng = seed::rng(seed);

    for _ in 0..PARTITION_RETRIES {
        let mut clients = vec![Vec::new(); num_clients];
        for members in by_class.iter().filter(|m| !m.is_empty()) {
            let p = loop {
                let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = draws.iter().sum();
                // Every draw can underflow for tiny β.
                if sum > 0.0 && sum.is_finite() {
                    break draws.into_iter().map(|g| g / sum).collect::<Vec<_>>();
                }
            };
            for &i in members {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = num_clients - 1;
                for (m, &pm) in p.iter().enumerate() {
                    acc += pm;
                    if u < acc {
                        pick = m;
                        break;
                    }
                }
                clients[pick].push(i);
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            clients.iter_mut().for_each(|c| c.sort_unstable());
            return Ok(Partition {
                client_indices: clients,
                beta,
                seed,
            });
        }
    }
    Err(Error::PartitionFailed {
        retries: PARTITION_RETRIES,
    })
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
