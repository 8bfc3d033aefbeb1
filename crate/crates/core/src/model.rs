//! A small LoRA-adapted classifier: frozen tanh backbone, one adapter per
//! layer, linear head, with hand-written backpropagation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::lora::LoraAdapter;
use crate::seed;
use crate::{Error, Result};

/// Frozen layer weights plus their adapters. Layer `l` maps width
/// `dims[l]` to `dims[l + 1]`, so its weight is `dims[l + 1] × dims[l]`.
/// Every layer but the last is followed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    frozen: Vec<Matrix>,
    adapters: Vec<LoraAdapter>,
}

impl ToyBackbone {
    pub fn new(frozen: Vec<Matrix>, adapters: Vec<LoraAdapter>) -> Result<Self> {
        if frozen.is_empty() {
            return Err(Error::Empty("backbone layers"));
        }
        if frozen.len() != adapters.len() {
            return Err(Error::InvalidParameter {
                name: "adapters",
                reason: "need exactly one adapter per layer",
            });
        }
        for pair in frozen.windows(2) {
            if pair[0].rows() != pair[1].cols() {
                return Err(Error::ShapeMismatch {
                    op: "backbone chain",
                    left: pair[0].shape(),
                    right: pair[1].shape(),
                });
            }
        }
        for (w, ad) in frozen.iter().zip(&adapters) {
            if w.shape() != ad.target_shape() {
                return Err(Error::ShapeMismatch {
                    op: "adapter shape",
                    left: w.shape(),
                    right: ad.target_shape(),
                });
            }
        }
        Ok(ToyBackbone { frozen, adapters })
    }

    /// Seeded Glorot-uniform frozen weights for the widths in `dims`
    /// (input first), with fresh adapters of the given rank.
    pub fn random(dims: &[usize], rank: usize, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "dims",
                reason: "need an input width and at least one layer",
            });
        }
        let mut rng = seed::rng(seed);
        let mut frozen = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (k, d) = (w[0], w[1]);
            let bound = libm::sqrt(6.0 / (k + d) as f64);
            frozen.push(Matrix::from_fn(d, k, |_, _| rng.random_range(-bound..=bound))?);
        }
        let adapters = fresh_adapters(&frozen, rank, seed::derive(seed, &[seed::stream::ADAPTER]))?;
        Self::new(frozen, adapters)
    }

    pub fn num_layers(&self) -> usize {
        self.frozen.len()
    }

    pub fn frozen_weights(&self) -> &[Matrix] {
        &self.frozen
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn input_dim(&self) -> usize {
        self.frozen[0].cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.frozen[self.frozen.len() - 1].rows()
    }

    /// Widths `[input, layer 1 out, …, layer L out]`.
    pub fn dims(&self) -> Vec<usize> {
        core::iter::once(self.input_dim())
            .chain(self.frozen.iter().map(Matrix::rows))
            .collect()
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank()
    }

    /// Replaces every adapter with a fresh one (`B = 0`, Kaiming `A`);
    /// layer `l` uses the sub-seed `derive(seed, [l])`.
    pub fn reset_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        self.adapters = fresh_adapters(&self.frozen, rank, seed)?;
        Ok(())
    }

    /// Adds `deltas[l]` into the frozen weight of layer `l`.
    pub fn fold_deltas(&mut self, deltas: &[Matrix]) -> Result<()> {
        if deltas.len() != self.frozen.len() {
            return Err(Error::InvalidParameter {
                name: "deltas",
                reason: "need one delta per layer",
            });
        }
        for (w, d) in self.frozen.iter_mut().zip(deltas) {
            w.add_scaled(1.0, d)?;
        }
        Ok(())
    }

    /// `W^l + B^l A^l` for every layer.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        self.frozen
            .iter()
            .zip(&self.adapters)
            .map(|(w, ad)| {
                if ad.b.is_zero() {
                    Ok(w.clone())
                } else {
                    w.add(&ad.delta()?)
                }
            })
            .collect()
    }
}

fn fresh_adapters(frozen: &[Matrix], rank: usize, seed: u64) -> Result<Vec<LoraAdapter>> {
    frozen
        .iter()
        .enumerate()
        .map(|(l, w)| LoraAdapter::init(w.rows(), w.cols(), rank, seed::derive(seed, &[l as u64])))
        .collect()
}

/// Linear classifier; row `c` of `weights` is the class-`c` head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::InvalidParameter {
                name: "classifier head",
                reason: "need at least two classes",
            });
        }
        if bias.len() != weights.rows() {
            return Err(Error::ShapeMismatch {
                op: "classifier head bias",
                left: weights.shape(),
                right: (bias.len(), 1),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("classifier head bias"));
        }
        Ok(ClassifierHead { weights, bias })
    }

    /// Uniform `±1/√feature_dim` weights and zero bias.
    pub fn random(num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let bound = 1.0 / libm::sqrt(feature_dim as f64);
        let weights = Matrix::from_fn(num_classes, feature_dim, |_, _| rng.random_range(-bound..=bound))?;
        Self::new(weights, vec![0.0; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }
}

/// Output of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Pre-logit activations, the output of the last backbone layer.
    pub features: Matrix,
    pub logits: Matrix,
}

struct Trace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// `tanh` outputs of the hidden layers.
    activations: Vec<Matrix>,
    weights: Vec<Matrix>,
    out: Forward,
}

fn run(backbone: &ToyBackbone, head: &ClassifierHead, x: &Matrix) -> Result<Trace> {
    if x.cols() != backbone.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward input",
            left: x.shape(),
            right: (x.rows(), backbone.input_dim()),
        });
    }
    if head.weights.cols() != backbone.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward head",
            left: head.weights.shape(),
            right: (head.num_classes(), backbone.feature_dim()),
        });
    }
    let weights = backbone.effective_weights()?;
    let last = weights.len() - 1;
    let mut inputs = Vec::with_capacity(weights.len());
    let mut activations = Vec::with_capacity(last);
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        let z = h.matmul_t(w)?;
        inputs.push(h);
        h = if l < last {
            let a = z.map(libm::tanh)?;
            activations.push(a.clone());
            a
        } else {
            z
        };
    }
    let mut logits = h.matmul_t(&head.weights)?;
    for i in 0..logits.rows() {
        for (c, b) in head.bias.iter().enumerate() {
            logits.set(i, c, logits.get(i, c) + b);
        }
    }
    Ok(Trace {
        inputs,
        activations,
        weights,
        out: Forward { features: h, logits },
    })
}

/// Pre-logit features and logits for a batch (one sample per row).
pub fn forward(backbone: &ToyBackbone, head: &ClassifierHead, x: &Matrix) -> Result<Forward> {
    run(backbone, head, x).map(|t| t.out)
}

/// Gradients of the loss for every trainable parameter. The frozen weights
/// have none.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub head: Matrix,
    pub bias: Vec<f64>,
}

/// Row-wise softmax probabilities and mean cross-entropy.
fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let c = logits.cols();
    let mut probs = Vec::with_capacity(logits.rows() * c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
        let sum: f64 = exps.iter().sum();
        loss += libm::log(sum) + max - row[y];
        probs.extend(exps.iter().map(|e| e / sum));
    }
    Ok((loss / labels.len() as f64, probs))
}

fn check_batch(x: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "batch labels",
            left: x.shape(),
            right: (labels.len(), 1),
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy of the batch.
pub fn loss(backbone: &ToyBackbone, head: &ClassifierHead, x: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(x, labels)?;
    let out = forward(backbone, head, x)?;
    softmax_xent(&out.logits, labels).map(|(l, _)| l)
}

/// Mean softmax cross-entropy and its gradients by backpropagation.
pub fn loss_and_grads(
    backbone: &ToyBackbone,
    head: &ClassifierHead,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    check_batch(x, labels)?;
    let trace = run(backbone, head, x)?;
    let (n, c) = trace.out.logits.shape();
    let (loss, mut probs) = softmax_xent(&trace.out.logits, labels)?;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        probs[i * c + y] -= 1.0;
    }
    probs.iter_mut().for_each(|p| *p *= inv_n);
    let dlogits = Matrix::from_vec(n, c, probs)?;

    let head_grad = dlogits.t_matmul(&trace.out.features)?;
    let bias_grad = (0..c).map(|j| (0..n).map(|i| dlogits.get(i, j)).sum()).collect();

    let layers = backbone.num_layers();
    let mut grad_a = Vec::with_capacity(layers);
    let mut grad_b = Vec::with_capacity(layers);
    let mut upstream = dlogits.matmul(&head.weights)?;
    for l in (0..layers).rev() {
        let dz = if l + 1 == layers {
            upstream
        } else {
            let act = &trace.activations[l];
            Matrix::from_fn(n, act.cols(), |i, j| {
                let t = act.get(i, j);
                upstream.get(i, j) * (1.0 - t * t)
            })?
        };
        // dL/dW_eff = dzᵀ · input; the adapter factors get its projections.
        let g = dz.t_matmul(&trace.inputs[l])?;
        let ad = &backbone.adapters[l];
        grad_b.push(g.matmul_t(&ad.a)?);
        grad_a.push(ad.b.t_matmul(&g)?);
        if l > 0 {
            upstream = dz.matmul(&trace.weights[l])?;
        } else {
            break;
        }
    }
    grad_a.reverse();
    grad_b.reverse();
    Ok((
        loss,
        Gradients {
            a: grad_a,
            b: grad_b,
            head: head_grad,
            bias: bias_grad,
        },
    ))
}

/// Argmax class per row; ties go to the lowest index.
pub fn predict(backbone: &ToyBackbone, head: &ClassifierHead, x: &Matrix) -> Result<Vec<usize>> {
    let out = forward(backbone, head, x)?;
    Ok(argmax_rows(&out.logits))
}

fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy on `data`.
pub fn accuracy(backbone: &ToyBackbone, head: &ClassifierHead, data: &Dataset) -> Result<f64> {
    let pred = predict(backbone, head, data.features())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Per-class pre-logit spread over correctly classified samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVarianceStats {
    /// Mean over feature dimensions of the population variance; zero for
    /// classes with fewer than two correct samples.
    pub sigma: Vec<f64>,
    pub correct_counts: Vec<usize>,
}

/// For each class, the mean per-dimension population variance of the
/// pre-logit features of samples that belong to the class and are
/// predicted as it.
pub fn class_variances(backbone: &ToyBackbone, head: &ClassifierHead, data: &Dataset) -> Result<ClassVarianceStats> {
    let out = forward(backbone, head, data.features())?;
    let pred = argmax_rows(&out.logits);
    let classes = head.num_classes();
    let dim = out.features.cols();

    let mut counts = vec![0usize; classes];
    let mut sums = vec![vec![0.0; dim]; classes];
    for (i, (&p, &y)) in pred.iter().zip(data.labels()).enumerate() {
        if p == y {
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(out.features.row(i)) {
                *s += v;
            }
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect())
        .collect();
    let mut sq = vec![0.0; classes];
    for (i, (&p, &y)) in pred.iter().zip(data.labels()).enumerate() {
        if p == y {
            sq[y] += out
                .features
                .row(i)
                .iter()
                .zip(&means[y])
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    let sigma = sq
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n < 2 { 0.0 } else { s / (n * dim) as f64 })
        .collect();
    Ok(ClassVarianceStats {
        sigma,
        correct_counts: counts,
    })
}
