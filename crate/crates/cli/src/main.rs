//! `logdpp`: train, evaluate and apply DPP basket-completion models.
//!
//! Every run is deterministic given its configuration and seed: all
//! randomness flows from `--seed`, and worker counts never change numeric
//! output. Exit codes: 0 success, 2 input error, 3 protocol or
//! configuration error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_complete, cmd_eval, cmd_gradcheck, cmd_train, CliError, GradcheckOpts};
use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "logdpp",
    version,
    about = "Shopping-basket completion with low-rank DPP models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a basket dataset and write a model file.
    Train(TrainArgs),
    /// Evaluate a model file on the held-out split of a dataset.
    Eval(EvalArgs),
    /// Suggest completion items for a comma-separated basket.
    Complete(CompleteArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file with line-oriented `key = value` pairs; flags win.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Write the machine-readable result here instead of standard output.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Seed for every random choice in the run.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Basket dataset path.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Dataset layout: basket-lines or csv-transactions.
    #[arg(long, value_name = "FORMAT")]
    format: Option<String>,
    /// Hold-out protocol: random, last-item or mixed.
    #[arg(long, value_name = "NAME")]
    protocol: Option<String>,
    /// Fraction of baskets that become the training split.
    #[arg(long, value_name = "F")]
    train_fraction: Option<f64>,
    /// Drop items appearing in fewer baskets than this.
    #[arg(long, value_name = "N")]
    min_item_count: Option<usize>,
    /// Drop baskets smaller than this.
    #[arg(long, value_name = "N")]
    min_basket_size: Option<usize>,
    /// Drop baskets larger than this (0 = unlimited).
    #[arg(long, value_name = "N")]
    max_basket_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Model kind: logistic, multitask or multitask-nobias.
    #[arg(long, value_name = "KIND")]
    model: Option<String>,
    /// Latent dimensions per item.
    #[arg(long, value_name = "N")]
    rank: Option<usize>,
    /// Score weight of the probability link.
    #[arg(long, value_name = "F")]
    w: Option<f64>,
    /// Global regularization strength.
    #[arg(long, value_name = "F")]
    alpha0: Option<f64>,
    /// Gradient step size.
    #[arg(long, value_name = "F")]
    step: Option<f64>,
    /// Momentum coefficient in [0, 1).
    #[arg(long, value_name = "F")]
    momentum: Option<f64>,
    /// Observations per gradient step.
    #[arg(long, value_name = "N")]
    minibatch: Option<usize>,
    /// Cap on full passes over the data.
    #[arg(long, value_name = "N")]
    max_epochs: Option<usize>,
    /// Stop once the relative epoch improvement drops below this.
    #[arg(long, value_name = "F")]
    convergence_tol: Option<f64>,
    /// Failure observations sampled per success.
    #[arg(long, value_name = "F")]
    negative_ratio: Option<f64>,
    /// Where to write the trained model.
    #[arg(long, value_name = "PATH")]
    model_file: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Trained model file to evaluate.
    #[arg(long, value_name = "PATH")]
    model_file: Option<PathBuf>,
    /// Push context items to the bottom of the ranking before scoring.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    mask_context: Option<bool>,
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model file to complete with.
    #[arg(long, value_name = "PATH")]
    model_file: Option<PathBuf>,
    /// The partial basket as comma-separated item tokens.
    #[arg(long, value_name = "TOKENS")]
    basket: String,
    /// Completion items to return.
    #[arg(long, value_name = "N")]
    count: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Check only this kind (default: all three kinds).
    #[arg(long, value_name = "KIND")]
    kind: Option<String>,
    /// Items in each random instance.
    #[arg(long, value_name = "N", default_value_t = 8)]
    items: usize,
    /// Latent dimensions in each random instance.
    #[arg(long, value_name = "N", default_value_t = 3)]
    rank: usize,
    /// Random instances per kind.
    #[arg(long, value_name = "N", default_value_t = 5)]
    instances: usize,
    /// Finite-difference step.
    #[arg(long, value_name = "F", default_value_t = 1e-5)]
    h: f64,
}

/// Builds the effective configuration: defaults, then the config file,
/// then explicit flags.
fn resolve(
    common: &CommonArgs,
    apply_flags: impl FnOnce(&mut RunConfig) -> Result<(), ConfigError>,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    apply_flags(&mut cfg)?;
    Ok(cfg)
}

fn apply_data_flags(cfg: &mut RunConfig, args: &DataArgs) -> Result<(), ConfigError> {
    if let Some(path) = &args.data {
        cfg.data = Some(path.clone());
    }
    if let Some(format) = &args.format {
        cfg.apply("format", format)?;
    }
    if let Some(protocol) = &args.protocol {
        cfg.apply("protocol", protocol)?;
    }
    if let Some(value) = args.train_fraction {
        cfg.train_fraction = value;
    }
    if let Some(value) = args.min_item_count {
        cfg.min_item_count = value;
    }
    if let Some(value) = args.min_basket_size {
        cfg.min_basket_size = value;
    }
    if let Some(value) = args.max_basket_size {
        cfg.max_basket_size = value;
    }
    Ok(())
}

/// Caps the global worker pool when requested; 0 keeps the default.
fn init_workers(workers: usize) -> Result<(), CliError> {
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| {
                CliError::Config(ConfigError(format!(
                    "cannot configure {workers} workers: {e}"
                )))
            })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve(&args.common, |cfg| {
                apply_data_flags(cfg, &args.data)?;
                if let Some(model) = &args.model {
                    cfg.apply("model", model)?;
                }
                if let Some(value) = args.rank {
                    cfg.rank = value;
                }
                if let Some(value) = args.w {
                    cfg.w = value;
                }
                if let Some(value) = args.alpha0 {
                    cfg.alpha0 = value;
                }
                if let Some(value) = args.step {
                    cfg.step = value;
                }
                if let Some(value) = args.momentum {
                    cfg.momentum = value;
                }
                if let Some(value) = args.minibatch {
                    cfg.minibatch = value;
                }
                if let Some(value) = args.max_epochs {
                    cfg.max_epochs = value;
                }
                if let Some(value) = args.convergence_tol {
                    cfg.convergence_tol = value;
                }
                if let Some(value) = args.negative_ratio {
                    cfg.negative_ratio = value;
                }
                if let Some(path) = &args.model_file {
                    cfg.model_file = path.clone();
                }
                Ok(())
            })?;
            init_workers(cfg.workers)?;
            cmd_train(&cfg)
        }
        Command::Eval(args) => {
            let cfg = resolve(&args.common, |cfg| {
                apply_data_flags(cfg, &args.data)?;
                if let Some(path) = &args.model_file {
                    cfg.model_file = path.clone();
                }
                if let Some(value) = args.mask_context {
                    cfg.mask_context = value;
                }
                Ok(())
            })?;
            init_workers(cfg.workers)?;
            cmd_eval(&cfg)
        }
        Command::Complete(args) => {
            let cfg = resolve(&args.common, |cfg| {
                if let Some(path) = &args.model_file {
                    cfg.model_file = path.clone();
                }
                if let Some(value) = args.count {
                    cfg.count = value;
                }
                Ok(())
            })?;
            init_workers(cfg.workers)?;
            cmd_complete(&cfg, &args.basket)
        }
        Command::Gradcheck(args) => {
            let cfg = resolve(&args.common, |_| Ok(()))?;
            init_workers(cfg.workers)?;
            let kinds = match &args.kind {
                None => vec![
                    logdpp::ModelKind::Logistic,
                    logdpp::ModelKind::Multitask,
                    logdpp::ModelKind::MultitaskNobias,
                ],
                Some(name) => {
                    vec![name
                        .parse()
                        .map_err(|e: logdpp::Error| ConfigError(e.to_string()))?]
                }
            };
            let opts = GradcheckOpts {
                kinds,
                items: args.items,
                rank: args.rank,
                instances: args.instances,
                h: args.h,
            };
            cmd_gradcheck(&cfg, &opts)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        process::exit(err.code());
    }
}
