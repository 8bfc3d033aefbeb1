//! Round engine: local client training, coefficient table, backbone and
//! head aggregation, and the four server strategies.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, Dataset};
use crate::linalg::{percentile_rank, Matrix};
use crate::lora::{Factor, ImportanceRecord};
use crate::model::{self, ClassVarianceStats, ClassifierHead, ToyBackbone};
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Everything one client reports after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// Materialized `B·A` per layer.
    pub deltas: Vec<Matrix>,
    pub importance: Vec<ImportanceRecord>,
    pub head: ClassifierHead,
    pub variance_stats: ClassVarianceStats,
    pub sample_count: usize,
    /// Loss on the client's own data after training; used for metrics only.
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.05,
            batch_size: 16,
            rank: 4,
        }
    }
}

/// How long a local run lasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Epochs(usize),
    /// Exact optimizer step count; passes over the data repeat as needed.
    Steps(usize),
}

/// Optimizer steps in `epochs` passes over `n` samples.
pub fn steps_per_run(n: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(batch_size.max(1))
}

/// Trains fresh adapters and a copy of the head on `data` with plain SGD.
pub fn local_train(
    backbone: &ToyBackbone,
    head: &ClassifierHead,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    local_train_budget(backbone, head, data, cfg, Budget::Epochs(cfg.epochs), seed)
}

/// [`local_train`] with an explicit budget.
///
/// Adapters are re-initialized from `derive(seed, [ADAPTER])` and mini-batch
/// order comes from `derive(seed, [SHUFFLE])`. The ω signals accumulate
/// `−⟨grad, Δθ⟩` for every factor at every step.
pub fn local_train_budget(
    backbone: &ToyBackbone,
    head: &ClassifierHead,
    data: &Dataset,
    cfg: &TrainConfig,
    budget: Budget,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::Empty("client data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter {
            name: "batch_size",
            reason: "must be positive",
        });
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "lr",
            reason: "must be positive and finite",
        });
    }
    let mut net = backbone.clone();
    net.reset_adapters(cfg.rank, seed::derive(seed, &[stream::ADAPTER]))?;
    let mut head = head.clone();
    let layers = net.num_layers();
    let mut importance: Vec<ImportanceRecord> = (1..=layers).map(ImportanceRecord::new).collect();

    let n = data.len();
    let total_steps = match budget {
        Budget::Epochs(e) => steps_per_run(n, cfg.batch_size, e),
        Budget::Steps(s) => s,
    };
    let mut rng = seed::rng(seed::derive(seed, &[stream::SHUFFLE]));
    let mut order = Vec::new();
    let mut cursor = n;
    for step in 0..total_steps {
        if cursor >= n {
            order = shuffled_indices(n, &mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = data.subset(&order[cursor..end])?;
        cursor = end;

        let (loss, grads) =
            model::loss_and_grads(&net, &head, batch.features(), batch.labels()).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step },
                e => e,
            })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for (l, ad) in net.adapters_mut().iter_mut().enumerate() {
            let new_a = sgd(&ad.a, &grads.a[l], cfg.lr).map_err(|_| Error::NonFiniteLoss { step })?;
            let new_b = sgd(&ad.b, &grads.b[l], cfg.lr).map_err(|_| Error::NonFiniteLoss { step })?;
            let rec = importance[l]
                .accumulate(Factor::A, &grads.a[l], &new_a.sub(&ad.a)?)?
                .accumulate(Factor::B, &grads.b[l], &new_b.sub(&ad.b)?)?;
            importance[l] = rec;
            ad.a = new_a;
            ad.b = new_b;
        }
        head.weights = sgd(&head.weights, &grads.head, cfg.lr).map_err(|_| Error::NonFiniteLoss { step })?;
        for (b, g) in head.bias.iter_mut().zip(&grads.bias) {
            *b -= cfg.lr * g;
        }
        if head.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
    }

    let train_loss = model::loss(&net, &head, data.features(), data.labels())?;
    let variance_stats = model::class_variances(&net, &head, data)?;
    Ok(ClientUpdate {
        deltas: net.adapters().iter().map(|a| a.delta()).collect::<Result<_>>()?,
        importance,
        head,
        variance_stats,
        sample_count: n,
        train_loss,
    })
}

fn sgd(param: &Matrix, grad: &Matrix, lr: f64) -> Result<Matrix> {
    let mut out = param.clone();
    out.add_scaled(-lr, grad)?;
    Ok(out)
}

/// Quantile-binned lookup from `(ω^A, ω^B)` percentile ranks to raw
/// merging weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GShapTable {
    pub a_thresholds: [f64; 2],
    pub b_thresholds: [f64; 2],
    /// `cells[a_bin][b_bin]`.
    pub cells: [[f64; 3]; 3],
    pub base_value: f64,
}

impl Default for GShapTable {
    /// The published calibration.
    fn default() -> Self {
        GShapTable {
            a_thresholds: [25.0, 50.0],
            b_thresholds: [60.0, 80.0],
            cells: [[0.038, 0.100, 0.193], [0.038, 0.089, 0.118], [0.038, 0.078, 0.093]],
            base_value: 0.063,
        }
    }
}

impl GShapTable {
    /// Checks threshold ordering, positivity and the non-decreasing b axis.
    pub fn validate(&self) -> Result<()> {
        for t in [self.a_thresholds, self.b_thresholds] {
            if !(t[0] > 0.0 && t[0] < t[1] && t[1] < 100.0) {
                return Err(Error::InvalidParameter {
                    name: "table thresholds",
                    reason: "must be strictly increasing inside (0, 100)",
                });
            }
        }
        if self.cells.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "table cells",
                reason: "must be positive and finite",
            });
        }
        if self.cells.iter().any(|row| row[0] > row[1] || row[1] > row[2]) {
            return Err(Error::InvalidParameter {
                name: "table cells",
                reason: "must be non-decreasing along the b axis",
            });
        }
        if !self.base_value.is_finite() {
            return Err(Error::NonFinite("table base_value"));
        }
        Ok(())
    }

    /// Bin of a percentile rank: `q < t0`, `t0 ≤ q ≤ t1`, `q > t1`.
    pub fn bin(q: f64, thresholds: [f64; 2]) -> usize {
        if q < thresholds[0] {
            0
        } else if q <= thresholds[1] {
            1
        } else {
            2
        }
    }

    pub fn lookup(&self, q_a: f64, q_b: f64) -> f64 {
        self.cells[Self::bin(q_a, self.a_thresholds)][Self::bin(q_b, self.b_thresholds)]
    }
}

/// Per-client, per-layer aggregation weights; each layer's column sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    /// `alpha[m][l]`.
    pub alpha: Vec<Vec<f64>>,
}

impl MergeCoefficients {
    pub fn num_clients(&self) -> usize {
        self.alpha.len()
    }

    pub fn num_layers(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    pub fn layer(&self, l: usize) -> Vec<f64> {
        self.alpha.iter().map(|row| row[l]).collect()
    }

    /// Same weights `w[m]` on every layer.
    pub fn uniform_over_layers(weights: &[f64], layers: usize) -> Self {
        MergeCoefficients {
            alpha: weights.iter().map(|&w| vec![w; layers]).collect(),
        }
    }
}

/// Table coefficients from per-client importance grids (`importance[m][l]`).
///
/// Percentile ranks are taken over the pooled `M × L` population of each
/// signal, looked up in the table, and normalized per layer.
pub fn alphas_from_importance(importance: &[Vec<ImportanceRecord>], table: &GShapTable) -> Result<MergeCoefficients> {
    let layers = importance.first().ok_or(Error::Empty("client updates"))?.len();
    if layers == 0 {
        return Err(Error::Empty("layers"));
    }
    if importance.iter().any(|r| r.len() != layers) {
        return Err(Error::InvalidParameter {
            name: "importance",
            reason: "all clients must report the same layer count",
        });
    }
    let pool_a: Vec<f64> = importance.iter().flatten().map(|r| r.omega_a).collect();
    let pool_b: Vec<f64> = importance.iter().flatten().map(|r| r.omega_b).collect();
    let mut raw = Vec::with_capacity(importance.len());
    for records in importance {
        let row = records
            .iter()
            .map(|r| {
                Ok(table.lookup(
                    percentile_rank(r.omega_a, &pool_a)?,
                    percentile_rank(r.omega_b, &pool_b)?,
                ))
            })
            .collect::<Result<Vec<f64>>>()?;
        raw.push(row);
    }
    for l in 0..layers {
        let total: f64 = raw.iter().map(|row| row[l]).sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "table cells",
                reason: "layer raw weights sum to zero",
            });
        }
        raw.iter_mut().for_each(|row| row[l] /= total);
    }
    Ok(MergeCoefficients { alpha: raw })
}

/// [`alphas_from_importance`] over the clients' reported records.
pub fn compute_alphas(updates: &[ClientUpdate], table: &GShapTable) -> Result<MergeCoefficients> {
    let grid: Vec<Vec<ImportanceRecord>> = updates.iter().map(|u| u.importance.clone()).collect();
    alphas_from_importance(&grid, table)
}

fn weighted_sum(mats: &[&Matrix], weights: &[f64]) -> Result<Matrix> {
    let first = mats[0];
    let mut out = Matrix::zeros(first.rows(), first.cols())?;
    for (m, &w) in mats.iter().zip(weights) {
        out.add_scaled(w, m)?;
    }
    Ok(out)
}

fn check_updates(updates: &[ClientUpdate]) -> Result<&ClientUpdate> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    for u in updates {
        if u.deltas.len() != first.deltas.len() {
            return Err(Error::InvalidParameter {
                name: "client update",
                reason: "layer counts differ",
            });
        }
        if u.head.weights.shape() != first.head.weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "client heads",
                left: first.head.weights.shape(),
                right: u.head.weights.shape(),
            });
        }
    }
    Ok(first)
}

/// `ΔW^l = Σ_m α_m^l · ΔW_m^l`.
pub fn merge_backbone(updates: &[ClientUpdate], coeffs: &MergeCoefficients) -> Result<Vec<Matrix>> {
    let first = check_updates(updates)?;
    if coeffs.num_clients() != updates.len() || coeffs.num_layers() != first.deltas.len() {
        return Err(Error::ShapeMismatch {
            op: "merge_backbone coefficients",
            left: (coeffs.num_clients(), coeffs.num_layers()),
            right: (updates.len(), first.deltas.len()),
        });
    }
    (0..first.deltas.len())
        .map(|l| {
            let mats: Vec<&Matrix> = updates.iter().map(|u| &u.deltas[l]).collect();
            weighted_sum(&mats, &coeffs.layer(l))
        })
        .collect()
}

fn merge_head_rows(updates: &[ClientUpdate], class_weights: impl Fn(usize) -> Vec<f64>) -> Result<ClassifierHead> {
    let first = check_updates(updates)?;
    let (classes, dim) = first.head.weights.shape();
    let mut weights = Matrix::zeros(classes, dim)?;
    let mut bias = vec![0.0; classes];
    for (c, bias_c) in bias.iter_mut().enumerate() {
        let w = class_weights(c);
        for (u, &wm) in updates.iter().zip(&w) {
            for (j, v) in u.head.weights.row(c).iter().enumerate() {
                weights.set(c, j, weights.get(c, j) + wm * v);
            }
            *bias_c += wm * u.head.bias[c];
        }
    }
    ClassifierHead::new(weights, bias)
}

/// Per-class head rows weighted by `σ_m^(c) / Σ_m σ_m^(c)`; a class whose
/// σ sum is zero, or whose σ is equal across clients, takes the plain mean
/// of the client rows. Bias entries use the same weights as their row.
pub fn merge_heads(updates: &[ClientUpdate]) -> Result<ClassifierHead> {
    let first = check_updates(updates)?;
    let classes = first.head.num_classes();
    if updates.iter().any(|u| u.variance_stats.sigma.len() != classes) {
        return Err(Error::InvalidParameter {
            name: "variance stats",
            reason: "sigma length differs from class count",
        });
    }
    let m = updates.len();
    merge_head_rows(updates, |c| {
        let total: f64 = updates.iter().map(|u| u.variance_stats.sigma[c]).sum();
        let first_sigma = updates[0].variance_stats.sigma[c];
        let all_equal = updates.iter().all(|u| u.variance_stats.sigma[c] == first_sigma);
        if total > 0.0 && !all_equal {
            updates.iter().map(|u| u.variance_stats.sigma[c] / total).collect()
        } else {
            vec![1.0 / m as f64; m]
        }
    })
}

/// `n_m / Σ n`.
pub fn sample_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    updates.iter().map(|u| u.sample_count as f64 / total as f64).collect()
}

/// Sample-count weighted average of deltas and heads.
pub fn fedavg_merge(updates: &[ClientUpdate]) -> Result<(Vec<Matrix>, ClassifierHead)> {
    let first = check_updates(updates)?;
    let w = sample_weights(updates);
    let coeffs = MergeCoefficients::uniform_over_layers(&w, first.deltas.len());
    let deltas = merge_backbone(updates, &coeffs)?;
    let head = merge_head_rows(updates, |_| w.clone())?;
    Ok((deltas, head))
}

/// Server aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Table coefficients for deltas, σ weighting for heads.
    Livar,
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Table coefficients for deltas, FedAvg heads.
    LivarAlphaOnly,
    /// FedAvg deltas, σ weighting for heads.
    LivarSigmaOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FedAvg,
        Strategy::LivarAlphaOnly,
        Strategy::LivarSigmaOnly,
        Strategy::Livar,
    ];

    pub fn from_flags(alpha: bool, sigma: bool) -> Self {
        match (alpha, sigma) {
            (false, false) => Strategy::FedAvg,
            (true, false) => Strategy::LivarAlphaOnly,
            (false, true) => Strategy::LivarSigmaOnly,
            (true, true) => Strategy::Livar,
        }
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Strategy::Livar | Strategy::LivarAlphaOnly)
    }

    pub fn uses_sigma(self) -> bool {
        matches!(self, Strategy::Livar | Strategy::LivarSigmaOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Livar => "livar",
            Strategy::FedAvg => "fedavg",
            Strategy::LivarAlphaOnly => "livar_alpha_only",
            Strategy::LivarSigmaOnly => "livar_sigma_only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or(Error::InvalidParameter {
                name: "strategy",
                reason: "expected livar, fedavg, livar_alpha_only or livar_sigma_only",
            })
    }
}

/// Result of server-side aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub deltas: Vec<Matrix>,
    pub head: ClassifierHead,
    /// Weights actually applied to the deltas.
    pub alphas: MergeCoefficients,
}

pub fn aggregate(strategy: Strategy, updates: &[ClientUpdate], table: &GShapTable) -> Result<Aggregate> {
    let first = check_updates(updates)?;
    let alphas = if strategy.uses_alpha() {
        compute_alphas(updates, table)?
    } else {
        MergeCoefficients::uniform_over_layers(&sample_weights(updates), first.deltas.len())
    };
    let deltas = merge_backbone(updates, &alphas)?;
    let head = if strategy.uses_sigma() {
        merge_heads(updates)?
    } else {
        fedavg_merge(updates)?.1
    };
    Ok(Aggregate { deltas, head, alphas })
}

/// Server-side model between rounds. Merged deltas are folded into the
/// frozen weights, so the global backbone always carries `B = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub backbone: ToyBackbone,
    pub head: ClassifierHead,
    /// Completed rounds.
    pub round: usize,
}

impl GlobalState {
    pub fn init(dims: &[usize], num_classes: usize, rank: usize, seed: u64) -> Result<Self> {
        let backbone = ToyBackbone::random(dims, rank, seed::derive(seed, &[stream::BACKBONE]))?;
        let head = ClassifierHead::random(num_classes, backbone.feature_dim(), seed::derive(seed, &[stream::HEAD]))?;
        Ok(GlobalState {
            backbone,
            head,
            round: 0,
        })
    }

    pub fn apply(&mut self, agg: &Aggregate) -> Result<()> {
        self.backbone.fold_deltas(&agg.deltas)?;
        self.head = agg.head.clone();
        self.round += 1;
        Ok(())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        model::accuracy(&self.backbone, &self.head, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub table: GShapTable,
    /// Master seed; client seeds derive from it.
    pub seed: u64,
}

/// Seed of client `client` in round `round` (0-based).
pub fn client_seed(master: u64, round: usize, client: usize) -> u64 {
    seed::derive(master, &[stream::CLIENT, round as u64, client as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub round: usize,
    pub strategy: Strategy,
    pub test_accuracy: f64,
    pub client_losses: Vec<f64>,
    pub mean_client_loss: f64,
    pub alphas: MergeCoefficients,
    /// `sigma[m][c]`.
    pub sigma: Vec<Vec<f64>>,
}

/// Runs the client side of a round. Implementations may execute clients
/// concurrently but must return results in client order.
pub trait ClientExecutor {
    fn run_clients<F>(&self, count: usize, job: F) -> Vec<Result<ClientUpdate>>
    where
        F: Fn(usize) -> Result<ClientUpdate> + Send + Sync;
}

/// Runs clients one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ClientExecutor for Sequential {
    fn run_clients<F>(&self, count: usize, job: F) -> Vec<Result<ClientUpdate>>
    where
        F: Fn(usize) -> Result<ClientUpdate> + Send + Sync,
    {
        (0..count).map(job).collect()
    }
}

/// Local training on every client, then aggregation under `cfg.strategy`.
pub fn run_round<E: ClientExecutor>(
    state: &GlobalState,
    clients: &[Dataset],
    test: &Dataset,
    cfg: &RoundConfig,
    executor: &E,
) -> Result<(GlobalState, RoundMetrics)> {
    if clients.is_empty() {
        return Err(Error::Empty("clients"));
    }
    let updates = executor
        .run_clients(clients.len(), |m| {
            local_train(
                &state.backbone,
                &state.head,
                &clients[m],
                &cfg.train,
                client_seed(cfg.seed, state.round, m),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(cfg.strategy, &updates, &cfg.table)?;
    let mut next = state.clone();
    next.apply(&agg)?;
    let client_losses: Vec<f64> = updates.iter().map(|u| u.train_loss).collect();
    let metrics = RoundMetrics {
        round: next.round,
        strategy: cfg.strategy,
        test_accuracy: next.accuracy(test)?,
        mean_client_loss: client_losses.iter().sum::<f64>() / client_losses.len() as f64,
        client_losses,
        alphas: agg.alphas,
        sigma: updates.iter().map(|u| u.variance_stats.sigma.clone()).collect(),
    };
    Ok((next, metrics))
}
