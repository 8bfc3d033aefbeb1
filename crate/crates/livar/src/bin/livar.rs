use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use livar::experiment::{cmd_ablate, cmd_calibrate, cmd_partition, cmd_run};
use livar::{Error, ExperimentConfig, Result};
use livar_core::fed::Strategy;

/// Federated LoRA aggregation simulator.
#[derive(Parser)]
#[command(name = "livar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated rounds and write metrics.csv, summary.json and model.lvar.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare {alpha on/off} x {sigma on/off} over a seed list.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Calibrate a coefficient table on a proxy data set.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Table output path [default: <out-dir>/gshap_table.json].
        #[arg(long)]
        table_out: Option<PathBuf>,
        /// Overwrite an existing table.
        #[arg(long)]
        force: bool,
    },
    /// Dump the per-client class histogram of the Dirichlet partition.
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV output path [default: <out-dir>/partition.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long = "clients")]
    num_clients: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, alias = "epochs")]
    local_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Master seed; falls back to the config file, then $LIVAR_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// livar, fedavg, livar_alpha_only or livar_sigma_only.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long = "layers")]
    num_layers: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long = "classes")]
    num_classes: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    /// Coefficient table JSON [default: built-in table].
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    dump_alphas: bool,
    #[arg(long)]
    parallel_clients: bool,
    #[arg(long)]
    num_seeds: Option<usize>,
    #[arg(long)]
    proxy_clients: Option<usize>,
    #[arg(long)]
    proxy_per_class: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let (mut cfg, seed_from_file) = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let has_seed = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v.get("seed").cloned())
                    .is_some();
                (ExperimentConfig::from_json_file(p)?, has_seed)
            }
            None => (ExperimentConfig::default(), false),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        set!(
            num_clients,
            beta,
            rounds,
            local_epochs,
            lr,
            batch_size,
            strategy,
            num_layers,
            hidden_width,
            rank,
            num_classes,
            input_dim,
            train_per_class,
            test_per_class,
            spread,
            num_seeds,
            proxy_clients,
            proxy_per_class
        );
        if self.table.is_some() {
            cfg.table = self.table.clone();
        }
        cfg.dump_alphas |= self.dump_alphas;
        cfg.parallel_clients |= self.parallel_clients;
        if let Some(s) = self.seed {
            cfg.seed = s;
        } else if !seed_from_file {
            if let Ok(v) = std::env::var("LIVAR_SEED") {
                cfg.seed = v.trim().parse().map_err(|_| Error::Config {
                    field: "seed",
                    reason: format!("LIVAR_SEED={v:?} is not an unsigned integer"),
                })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = config.resolve()?;
            let out = cmd_run(&cfg, &config.out_dir)?;
            for m in &out.rounds {
                println!(
                    "round {} {} accuracy {:.4} loss {:.4}",
                    m.round, m.strategy, m.test_accuracy, m.mean_client_loss
                );
            }
        }
        Command::Ablate { config } => {
            let cfg = config.resolve()?;
            for r in cmd_ablate(&cfg, &config.out_dir)? {
                println!(
                    "alpha={:<5} sigma={:<5} mean_acc={:.4} std_acc={:.4}",
                    r.alpha, r.sigma, r.mean_acc, r.std_acc
                );
            }
        }
        Command::Calibrate {
            config,
            table_out,
            force,
        } => {
            let cfg = config.resolve()?;
            let table_path = table_out.unwrap_or_else(|| config.out_dir.join("gshap_table.json"));
            let out = cmd_calibrate(&cfg, &config.out_dir, &table_path, force)?;
            println!("table written to {}", table_path.display());
            for row in &out.table.cells {
                println!("  {:.4} {:.4} {:.4}", row[0], row[1], row[2]);
            }
            println!(
                "trend: fitted {} default {}",
                pass(out.fitted_trend.passes()),
                pass(out.default_trend.passes())
            );
        }
        Command::Partition { config, out } => {
            let cfg = config.resolve()?;
            let path = out.unwrap_or_else(|| config.out_dir.join("partition.csv"));
            let hist = cmd_partition(&cfg, &path)?;
            println!("{} clients written to {}", hist.len(), display(&path));
        }
    }
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
