//! Experiment drivers behind the CLI subcommands.

use std::path::{Path, PathBuf};

use livar_core::calibration::{calibrate, fit_table, proxy_setup, validate_trend, CalibrationRun, TrendReport};
use livar_core::data::{dirichlet_partition, make_blobs_split, Dataset, Partition};
use livar_core::fed::{
    run_round, ClientExecutor, GShapTable, GlobalState, RoundConfig, RoundMetrics, Sequential, Strategy,
};
use livar_core::seed::{self, stream};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::io::{
    self,
    metrics::write_metrics,
    snapshot::write_snapshot,
    table::{load_table, save_table},
};
use crate::parallel::Parallel;
use crate::{Error, ExperimentConfig, Result};

/// Data, partition and initial model for one configuration.
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub clients: Vec<Dataset>,
    pub state: GlobalState,
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train, test) = make_blobs_split(
        cfg.num_classes,
        cfg.input_dim,
        cfg.train_per_class,
        cfg.test_per_class,
        cfg.spread,
        seed::derive(cfg.seed, &[stream::DATA]),
    )?;
    let partition = if cfg.num_clients == 1 {
        Partition {
            client_indices: vec![(0..train.len()).collect()],
            beta: cfg.beta,
            seed: cfg.seed,
        }
    } else {
        dirichlet_partition(
            train.labels(),
            cfg.num_clients,
            cfg.beta,
            seed::derive(cfg.seed, &[stream::PARTITION]),
        )?
    };
    let clients = partition.split(&train)?;
    let state = GlobalState::init(&cfg.dims(), cfg.num_classes, cfg.rank, cfg.seed)?;
    Ok(Setup {
        train,
        test,
        partition,
        clients,
        state,
    })
}

pub fn resolve_table(cfg: &ExperimentConfig) -> Result<GShapTable> {
    match &cfg.table {
        Some(p) => load_table(p),
        None => Ok(GShapTable::default()),
    }
}

pub struct RunOutput {
    pub rounds: Vec<RoundMetrics>,
    pub state: GlobalState,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(0.0, |m| m.test_accuracy)
    }
}

fn run_rounds<E: ClientExecutor>(
    s: Setup,
    cfg: &ExperimentConfig,
    round_cfg: &RoundConfig,
    exec: &E,
) -> Result<RunOutput> {
    let mut state = s.state;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (next, metrics) = run_round(&state, &s.clients, &s.test, round_cfg, exec)?;
        state = next;
        rounds.push(metrics);
    }
    Ok(RunOutput { rounds, state })
}

/// All rounds of one configuration under `cfg.strategy`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let table = resolve_table(cfg)?;
    let s = setup(cfg)?;
    let round_cfg = RoundConfig {
        train: cfg.train(),
        strategy: cfg.strategy,
        table,
        seed: cfg.seed,
    };
    if cfg.parallel_clients {
        run_rounds(s, cfg, &round_cfg, &Parallel)
    } else {
        run_rounds(s, cfg, &round_cfg, &Sequential)
    }
}

pub fn summary_json(cfg: &ExperimentConfig, out: &RunOutput) -> serde_json::Value {
    json!({
        "final_accuracy": out.final_accuracy(),
        "per_round_accuracies": out.rounds.iter().map(|m| m.test_accuracy).collect::<Vec<_>>(),
        "config": cfg,
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json value");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Output paths of `run`.
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub model: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        RunArtifacts {
            metrics: dir.join("metrics.csv"),
            summary: dir.join("summary.json"),
            model: dir.join("model.lvar"),
        }
    }
}

/// Runs the experiment and writes `metrics.csv`, `summary.json` and the
/// final `model.lvar` snapshot into `out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    ensure_dir(out_dir)?;
    let paths = RunArtifacts::in_dir(out_dir);
    let w = io::create(&paths.metrics)?;
    write_metrics(w, &out.rounds, cfg.dump_alphas).map_err(|e| Error::format(&paths.metrics, e))?;
    write_json(&paths.summary, &summary_json(cfg, &out))?;
    let mut w = io::create(&paths.model)?;
    write_snapshot(&mut w, &out.state.backbone, &out.state.head).map_err(|e| Error::io(&paths.model, e))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub alpha: bool,
    pub sigma: bool,
    pub mean_acc: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_acc: f64,
    /// `(seed, final accuracy)` per run.
    pub runs: Vec<(u64, f64)>,
}

pub fn ablation_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.num_seeds as u64).map(|i| cfg.seed + i).collect()
}

/// The `{α off/on} × {σ off/on}` grid over `seeds`, rows ordered
/// (off, off), (on, off), (off, on), (on, on). Runs execute in parallel;
/// each one is seeded independently, so results do not depend on
/// scheduling.
pub fn ablate(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config {
            field: "num_seeds",
            reason: "need at least one seed".into(),
        });
    }
    resolve_table(cfg)?;
    let jobs: Vec<(Strategy, u64)> = Strategy::ALL
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let run_cfg = ExperimentConfig {
                strategy,
                seed,
                parallel_clients: false,
                ..cfg.clone()
            };
            run_experiment(&run_cfg).map(|o| o.final_accuracy())
        })
        .collect::<Result<_>>()?;
    Ok(Strategy::ALL
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let accs = &results[i * seeds.len()..(i + 1) * seeds.len()];
            let (mean, std) = mean_std(accs);
            AblationRow {
                alpha: s.uses_alpha(),
                sigma: s.uses_sigma(),
                mean_acc: mean,
                std_acc: std,
                runs: seeds.iter().copied().zip(accs.iter().copied()).collect(),
            }
        })
        .collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Writes `ablation.csv` (`alpha,sigma,mean_acc,std_acc`) and
/// `ablation_runs.csv` (`alpha,sigma,seed,accuracy`).
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let rows = ablate(cfg, &ablation_seeds(cfg))?;
    ensure_dir(out_dir)?;
    let path = out_dir.join("ablation.csv");
    let fmt = |e: csv::Error| Error::format(out_dir, e);
    let mut w = csv::Writer::from_writer(io::create(&path)?);
    w.write_record(["alpha", "sigma", "mean_acc", "std_acc"]).map_err(fmt)?;
    for r in &rows {
        w.write_record([
            on_off(r.alpha),
            on_off(r.sigma),
            &r.mean_acc.to_string(),
            &r.std_acc.to_string(),
        ])
        .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("ablation_runs.csv");
    let mut w = csv::Writer::from_writer(io::create(&path)?);
    w.write_record(["alpha", "sigma", "seed", "accuracy"]).map_err(fmt)?;
    for r in &rows {
        for (seed, acc) in &r.runs {
            w.write_record([on_off(r.alpha), on_off(r.sigma), &seed.to_string(), &acc.to_string()])
                .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn run_calibration(cfg: &ExperimentConfig) -> Result<CalibrationRun> {
    cfg.validate()?;
    let proxy = cfg.proxy();
    let (clients, state) = proxy_setup(&proxy)?;
    let run = if cfg.parallel_clients {
        calibrate(&state, &clients, &proxy.train, proxy.seed, &Parallel)?
    } else {
        calibrate(&state, &clients, &proxy.train, proxy.seed, &Sequential)?
    };
    Ok(run)
}

pub struct CalibrationOutput {
    pub run: CalibrationRun,
    pub table: GShapTable,
    pub fitted_trend: TrendReport,
    pub default_trend: TrendReport,
}

/// Proxy calibration, table fit and trend check. Writes the table to
/// `table_path` (refusing to overwrite unless `force`), plus
/// `calibration_report.csv` and `calibration_trend.csv` into `out_dir`.
pub fn cmd_calibrate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    table_path: &Path,
    force: bool,
) -> Result<CalibrationOutput> {
    if table_path.exists() && !force {
        return Err(Error::Exists(table_path.to_path_buf()));
    }
    let run = run_calibration(cfg)?;
    let defaults = GShapTable::default();
    let table = fit_table(&run, defaults.a_thresholds, defaults.b_thresholds)?;
    let fitted_trend = validate_trend(&table);
    let default_trend = validate_trend(&defaults);

    save_table(table_path, &table, force)?;
    ensure_dir(out_dir)?;
    let fmt = |e: csv::Error| Error::format(out_dir, e);
    let path = out_dir.join("calibration_report.csv");
    let mut w = csv::Writer::from_writer(io::create(&path)?);
    w.write_record(["layer", "client", "omega_a", "omega_b", "lambda", "residual"])
        .map_err(fmt)?;
    for l in 0..run.num_layers() {
        for m in 0..run.num_clients() {
            let rec = run.omegas[m][l];
            w.write_record([
                rec.layer_index.to_string(),
                m.to_string(),
                rec.omega_a.to_string(),
                rec.omega_b.to_string(),
                run.lambdas[m][l].to_string(),
                run.residuals[l].to_string(),
            ])
            .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("calibration_trend.csv");
    let mut w = csv::Writer::from_writer(io::create(&path)?);
    w.write_record(["table", "check", "index", "pass"]).map_err(fmt)?;
    for (name, rep) in [("fitted", fitted_trend), ("default", default_trend)] {
        for (i, pass) in rep.b_rows.iter().enumerate() {
            w.write_record([name, "b_row_non_decreasing", &i.to_string(), &pass.to_string()])
                .map_err(fmt)?;
        }
        for (i, pass) in rep.a_cols.iter().enumerate() {
            w.write_record([name, "a_col_non_increasing", &i.to_string(), &pass.to_string()])
                .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(CalibrationOutput {
        run,
        table,
        fitted_trend,
        default_trend,
    })
}

/// Per-client class histogram: `client,class_0,…,class_{C-1},total`.
pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Vec<usize>>> {
    let s = setup(cfg)?;
    let hist = s.partition.class_histogram(s.train.labels(), cfg.num_classes);
    let mut w = csv::Writer::from_writer(io::create(out)?);
    let fmt = |e: csv::Error| Error::format(out, e);
    let mut header = vec!["client".to_string()];
    header.extend((0..cfg.num_classes).map(|c| format!("class_{c}")));
    header.push("total".into());
    w.write_record(&header).map_err(fmt)?;
    for (m, h) in hist.iter().enumerate() {
        let mut rec = vec![m.to_string()];
        rec.extend(h.iter().map(usize::to_string));
        rec.push(h.iter().sum::<usize>().to_string());
        w.write_record(&rec).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(hist)
}
