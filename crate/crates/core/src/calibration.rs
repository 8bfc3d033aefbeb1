//! Proxy calibration of the coefficient table.
//!
//! A handful of clients train for one round next to a centralized model on
//! their pooled data. Per layer, NNLS finds the non-negative combination of
//! client deltas closest to the centralized delta; those λ values, binned by
//! the percentile ranks of the clients' ω signals, give a 3×3 table.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, make_blobs, Dataset, Partition};
use crate::fed::{
    client_seed, local_train, local_train_budget, steps_per_run, Budget, ClientExecutor, GShapTable, GlobalState,
    TrainConfig,
};
use crate::linalg::{nnls_solve, percentile_rank, Matrix};
use crate::lora::ImportanceRecord;
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Smallest value a fitted cell may take.
pub const CELL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub clients: usize,
    pub beta: f64,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    /// Backbone widths after the input layer.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            clients: 5,
            beta: 0.5,
            num_classes: 10,
            dim: 16,
            per_class: 60,
            spread: 1.0,
            hidden: vec![32; 4],
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl ProxyConfig {
    pub fn dims(&self) -> Vec<usize> {
        core::iter::once(self.dim).chain(self.hidden.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRun {
    /// `lambdas[m][l]`.
    pub lambdas: Vec<Vec<f64>>,
    /// `omegas[m][l]`.
    pub omegas: Vec<Vec<ImportanceRecord>>,
    /// NNLS residual norm per layer.
    pub residuals: Vec<f64>,
    pub joint_deltas: Vec<Matrix>,
    /// `client_deltas[m][l]`.
    pub client_deltas: Vec<Vec<Matrix>>,
}

impl CalibrationRun {
    pub fn num_clients(&self) -> usize {
        self.lambdas.len()
    }

    pub fn num_layers(&self) -> usize {
        self.residuals.len()
    }

    /// Residual of the equal-weight combination `(1/K)·Σ ΔW_m^l` per layer.
    pub fn uniform_residuals(&self) -> Vec<f64> {
        let k = self.client_deltas.len() as f64;
        self.joint_deltas
            .iter()
            .enumerate()
            .map(|(l, joint)| {
                let mut r = joint.clone();
                for deltas in &self.client_deltas {
                    r.add_scaled(-1.0 / k, &deltas[l]).expect("calibration shapes agree");
                }
                r.frobenius_norm()
            })
            .collect()
    }
}

/// Per-layer NNLS of the joint delta on the client deltas.
pub fn solve_lambdas(
    client_deltas: Vec<Vec<Matrix>>,
    joint_deltas: Vec<Matrix>,
    omegas: Vec<Vec<ImportanceRecord>>,
) -> Result<CalibrationRun> {
    let k = client_deltas.len();
    if k == 0 || joint_deltas.is_empty() {
        return Err(Error::DegenerateCalibration("no clients or layers"));
    }
    let layers = joint_deltas.len();
    if client_deltas.iter().any(|d| d.len() != layers) || omegas.len() != k || omegas.iter().any(|o| o.len() != layers)
    {
        return Err(Error::InvalidParameter {
            name: "calibration inputs",
            reason: "client grids must be K × L",
        });
    }
    let mut lambdas = vec![vec![0.0; layers]; k];
    let mut residuals = Vec::with_capacity(layers);
    for (l, joint) in joint_deltas.iter().enumerate() {
        let atoms: Vec<Matrix> = client_deltas.iter().map(|d| d[l].clone()).collect();
        if joint.is_zero() || atoms.iter().all(Matrix::is_zero) {
            return Err(Error::DegenerateCalibration("all-zero deltas in a layer"));
        }
        let sol = nnls_solve(&atoms, joint)?;
        for (m, c) in sol.coefficients.iter().enumerate() {
            lambdas[m][l] = *c;
        }
        residuals.push(sol.residual_norm);
    }
    Ok(CalibrationRun {
        lambdas,
        omegas,
        residuals,
        joint_deltas,
        client_deltas,
    })
}

/// Proxy data set, its client split and the shared initial model.
pub fn proxy_setup(cfg: &ProxyConfig) -> Result<(Vec<Dataset>, GlobalState)> {
    if cfg.clients == 0 {
        return Err(Error::InvalidParameter {
            name: "clients",
            reason: "must be positive",
        });
    }
    let data = make_blobs(
        cfg.num_classes,
        cfg.dim,
        cfg.per_class,
        cfg.spread,
        seed::derive(cfg.seed, &[stream::PROXY, stream::DATA]),
    )?;
    let partition = if cfg.clients == 1 {
        Partition {
            client_indices: vec![(0..data.len()).collect()],
            beta: cfg.beta,
            seed: cfg.seed,
        }
    } else {
        dirichlet_partition(
            data.labels(),
            cfg.clients,
            cfg.beta,
            seed::derive(cfg.seed, &[stream::PROXY, stream::PARTITION]),
        )?
    };
    let clients = partition.split(&data)?;
    let state = GlobalState::init(
        &cfg.dims(),
        cfg.num_classes,
        cfg.train.rank,
        seed::derive(cfg.seed, &[stream::PROXY]),
    )?;
    Ok((clients, state))
}

/// One federated round on the proxy clients next to a centralized model.
///
/// The centralized model trains on the concatenated client data for the
/// mean client step count (rounded), with client 0's seed.
pub fn calibrate<E: ClientExecutor>(
    state: &GlobalState,
    clients: &[Dataset],
    train: &TrainConfig,
    master_seed: u64,
    executor: &E,
) -> Result<CalibrationRun> {
    if clients.is_empty() {
        return Err(Error::Empty("proxy clients"));
    }
    let updates = executor
        .run_clients(clients.len(), |m| {
            local_train(
                &state.backbone,
                &state.head,
                &clients[m],
                train,
                client_seed(master_seed, 0, m),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let pooled = Dataset::concat(clients)?;
    let total_steps: usize = clients
        .iter()
        .map(|c| steps_per_run(c.len(), train.batch_size, train.epochs))
        .sum();
    let steps = (total_steps + clients.len() / 2) / clients.len();
    let joint = local_train_budget(
        &state.backbone,
        &state.head,
        &pooled,
        train,
        Budget::Steps(steps),
        client_seed(master_seed, 0, 0),
    )?;

    let omegas = updates.iter().map(|u| u.importance.clone()).collect();
    let client_deltas = updates.into_iter().map(|u| u.deltas).collect();
    solve_lambdas(client_deltas, joint.deltas, omegas)
}

pub fn run_proxy<E: ClientExecutor>(cfg: &ProxyConfig, executor: &E) -> Result<CalibrationRun> {
    let (clients, state) = proxy_setup(cfg)?;
    calibrate(&state, &clients, &cfg.train, cfg.seed, executor)
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (equal weights).
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    // (sum, count) blocks
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s2, c2) = blocks[blocks.len() - 1];
            let (s1, c1) = blocks[blocks.len() - 2];
            if s1 / c1 as f64 > s2 / c2 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s1 + s2, c1 + c2);
            } else {
                break;
            }
        }
    }
    blocks
        .into_iter()
        .flat_map(|(s, c)| core::iter::repeat_n(s / c as f64, c))
        .collect()
}

/// Binned-mean estimate of the coefficient table.
///
/// Each `(m, l)` pair lands in the cell of its pooled ω percentile ranks and
/// cells average their λ. Empty cells take the mean of filled neighbours
/// along the b axis (then the a axis), rows are projected onto
/// non-decreasing sequences along b, and values are floored at
/// [`CELL_FLOOR`]. `base_value` is the mean λ.
pub fn fit_table(run: &CalibrationRun, a_thresholds: [f64; 2], b_thresholds: [f64; 2]) -> Result<GShapTable> {
    let pairs: Vec<(ImportanceRecord, f64)> = run
        .omegas
        .iter()
        .zip(&run.lambdas)
        .flat_map(|(o, l)| o.iter().copied().zip(l.iter().copied()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::DegenerateCalibration("empty run"));
    }
    let pool_a: Vec<f64> = pairs.iter().map(|(r, _)| r.omega_a).collect();
    let pool_b: Vec<f64> = pairs.iter().map(|(r, _)| r.omega_b).collect();
    let mut sums = [[0.0; 3]; 3];
    let mut counts = [[0usize; 3]; 3];
    for (rec, lambda) in &pairs {
        let a = GShapTable::bin(percentile_rank(rec.omega_a, &pool_a)?, a_thresholds);
        let b = GShapTable::bin(percentile_rank(rec.omega_b, &pool_b)?, b_thresholds);
        sums[a][b] += lambda;
        counts[a][b] += 1;
    }
    let mut cells: [[Option<f64>; 3]; 3] = [[None; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            if counts[a][b] > 0 {
                cells[a][b] = Some(sums[a][b] / counts[a][b] as f64);
            }
        }
    }
    fill_empty(&mut cells)?;

    let mut out = [[0.0; 3]; 3];
    for a in 0..3 {
        let row: Vec<f64> = cells[a].iter().map(|c| c.expect("filled")).collect();
        for (b, v) in isotonic_non_decreasing(&row).into_iter().enumerate() {
            out[a][b] = v.max(CELL_FLOOR);
        }
    }
    let base_value = pairs.iter().map(|(_, l)| l).sum::<f64>() / pairs.len() as f64;
    let table = GShapTable {
        a_thresholds,
        b_thresholds,
        cells: out,
        base_value,
    };
    table.validate()?;
    Ok(table)
}

fn fill_empty(cells: &mut [[Option<f64>; 3]; 3]) -> Result<()> {
    if cells.iter().flatten().all(Option::is_none) {
        return Err(Error::DegenerateCalibration("all table cells empty"));
    }
    while cells.iter().flatten().any(Option::is_none) {
        let mut changed = false;
        for along_b in [true, false] {
            let snapshot = *cells;
            for a in 0..3 {
                for b in 0..3 {
                    if snapshot[a][b].is_some() {
                        continue;
                    }
                    let neighbours: Vec<f64> = if along_b {
                        [b.wrapping_sub(1), b + 1]
                            .into_iter()
                            .filter(|&j| j < 3)
                            .filter_map(|j| snapshot[a][j])
                            .collect()
                    } else {
                        [a.wrapping_sub(1), a + 1]
                            .into_iter()
                            .filter(|&i| i < 3)
                            .filter_map(|i| snapshot[i][b])
                            .collect()
                    };
                    if !neighbours.is_empty() {
                        cells[a][b] = Some(neighbours.iter().sum::<f64>() / neighbours.len() as f64);
                        changed = true;
                    }
                }
            }
            if changed {
                break;
            }
        }
        debug_assert!(changed, "a non-empty 3x3 grid always fills");
    }
    Ok(())
}

/// Monotone-trend check of a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendReport {
    /// Per a-bin row: non-decreasing along b.
    pub b_rows: [bool; 3],
    /// Per b-bin column: non-increasing along a.
    pub a_cols: [bool; 3],
}

impl TrendReport {
    pub fn passes(&self) -> bool {
        self.b_rows.iter().chain(&self.a_cols).all(|&p| p)
    }
}

pub fn validate_trend(table: &GShapTable) -> TrendReport {
    let c = &table.cells;
    let mut b_rows = [false; 3];
    let mut a_cols = [false; 3];
    for i in 0..3 {
        b_rows[i] = c[i][0] <= c[i][1] && c[i][1] <= c[i][2];
        a_cols[i] = c[0][i] >= c[1][i] && c[1][i] >= c[2][i];
    }
    TrendReport { b_rows, a_cols }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::Sequential;

    fn rec(a: f64, b: f64, l: usize) -> ImportanceRecord {
        ImportanceRecord {
            omega_a: a,
            omega_b: b,
            layer_index: l,
        }
    }

    fn synthetic_run(omegas: Vec<Vec<ImportanceRecord>>, lambdas: Vec<Vec<f64>>) -> CalibrationRun {
        let layers = lambdas[0].len();
        CalibrationRun {
            residuals: vec![0.0; layers],
            joint_deltas: vec![Matrix::zeros(1, 1).unwrap(); layers],
            client_deltas: vec![vec![Matrix::zeros(1, 1).unwrap(); layers]; lambdas.len()],
            lambdas,
            omegas,
        }
    }

    #[test]
    fn constant_lambda_constant_table() {
        let omegas: Vec<Vec<_>> = (0..4)
            .map(|m| {
                (0..3)
                    .map(|l| rec((m * 3 + l) as f64, ((m * 7 + l * 5) % 12) as f64, l + 1))
                    .collect()
            })
            .collect();
        let run = synthetic_run(omegas, vec![vec![0.3; 3]; 4]);
        let t = fit_table(&run, [25.0, 50.0], [60.0, 80.0]).unwrap();
        assert!(t.cells.iter().flatten().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!((t.base_value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn isotonic_is_identity_on_monotone_rows() {
        let row = [0.038, 0.089, 0.118];
        assert_eq!(isotonic_non_decreasing(&row), row.to_vec());
        assert_eq!(isotonic_non_decreasing(&[3.0, 1.0, 2.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic_non_decreasing(&[1.0, 3.0, 2.0]), vec![1.0, 2.5, 2.5]);
    }

    #[test]
    fn planted_b_doubling() {
        // 40 clients, 1 layer: ω^A cycles through all quantiles, ω^B ranks
        // by client. Top-ω^B pairs carry λ = 0.4, the rest 0.2.
        let n = 40;
        let omegas: Vec<Vec<_>> = (0..n).map(|m| vec![rec(((m * 13) % n) as f64, m as f64, 1)]).collect();
        let lambdas: Vec<Vec<f64>> = (0..n)
            .map(|m| {
                let q_b = 100.0 * (m as f64 + 0.5) / n as f64;
                vec![if q_b > 80.0 {
                    0.4
                } else if q_b < 60.0 {
                    0.2
                } else {
                    0.3
                }]
            })
            .collect();
        let t = fit_table(&synthetic_run(omegas, lambdas), [25.0, 50.0], [60.0, 80.0]).unwrap();
        for row in &t.cells {
            let ratio = row[2] / row[0];
            assert!((ratio - 2.0).abs() <= 0.4, "{row:?}");
        }
    }

    #[test]
    fn fitted_tables_are_valid_with_sparse_bins() {
        // Two pairs only: most cells must be filled from neighbours.
        let run = synthetic_run(
            vec![vec![rec(0.0, 0.0, 1)], vec![rec(1.0, 1.0, 1)]],
            vec![vec![0.9], vec![0.0]],
        );
        let t = fit_table(&run, [25.0, 50.0], [60.0, 80.0]).unwrap();
        t.validate().unwrap();
        assert!(t.cells.iter().flatten().all(|&v| v >= CELL_FLOOR));
    }

    #[test]
    fn trend_validation() {
        assert!(validate_trend(&GShapTable::default()).passes());
        let flat = GShapTable {
            cells: [[0.5; 3]; 3],
            ..GShapTable::default()
        };
        assert!(validate_trend(&flat).passes());
        let mut bad = GShapTable::default();
        bad.cells[0][2] = 0.05;
        bad.cells[0][1] = 0.10;
        let rep = validate_trend(&bad);
        assert!(!rep.b_rows[0]);
        assert!(rep.b_rows[1] && rep.b_rows[2]);
    }

    #[test]
    fn planted_recovery() {
        let d1 = Matrix::from_fn(3, 4, |i, j| libm::sin((i * 4 + j) as f64 + 0.3)).unwrap();
        let d2 = Matrix::from_fn(3, 4, |i, j| libm::cos((i * 7 + j * 3) as f64)).unwrap();
        let mut joint = d1.scaled(0.7).unwrap();
        joint.add_scaled(0.3, &d2).unwrap();
        let run = solve_lambdas(
            vec![vec![d1], vec![d2]],
            vec![joint],
            vec![vec![rec(1.0, 1.0, 1)], vec![rec(2.0, 2.0, 1)]],
        )
        .unwrap();
        assert!((run.lambdas[0][0] - 0.7).abs() < 1e-6);
        assert!((run.lambdas[1][0] - 0.3).abs() < 1e-6);
        assert!(run.residuals[0] < 1e-9);
    }

    #[test]
    fn zero_deltas_are_degenerate() {
        let z = Matrix::zeros(2, 2).unwrap();
        let err = solve_lambdas(vec![vec![z.clone()]], vec![z], vec![vec![rec(0.0, 0.0, 1)]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration(_)));
    }

    #[test]
    fn single_client_self_recovery() {
        let cfg = ProxyConfig {
            clients: 1,
            per_class: 8,
            num_classes: 3,
            dim: 6,
            hidden: vec![8, 6],
            train: TrainConfig {
                epochs: 2,
                rank: 2,
                ..TrainConfig::default()
            },
            ..ProxyConfig::default()
        };
        let run = run_proxy(&cfg, &Sequential).unwrap();
        for l in 0..run.num_layers() {
            assert!((run.lambdas[0][l] - 1.0).abs() < 1e-9, "{:?}", run.lambdas);
            assert!(run.residuals[l] < 1e-9);
        }
    }
}
