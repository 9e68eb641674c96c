//! The four pipeline commands and their shared plumbing: error-to-exit-code
//! mapping, machine-readable `key = value` records on standard output (or
//! an atomically written `--out` file) and human logs on standard error.

use std::fmt;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use logdpp::serialize::write_atomic;
use logdpp::{
    evaluate, filter_dataset, gradient_check, load_baskets, make_eval_cases, make_examples,
    regularization_weights, split, train_with_progress, Error, EvalOptions, ModelArtifact,
    ModelKind, ModelParams,
};

use crate::config::{ConfigError, RunConfig};

/// A failed run, split by exit-code class: configuration problems versus
/// errors bubbling up from the pipeline itself.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(Error),
}

impl CliError {
    /// Exit-code contract: 2 input error, 3 protocol or configuration
    /// error, 4 numerical failure.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidInput(_) | Error::Parse { .. } | Error::Io { .. } => 2,
                Error::Protocol(_) => 3,
                Error::SingularKernel | Error::Numerical(_) => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration: {e}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

/// Writes the result record to stdout, or atomically to the `--out` path.
fn emit(out: Option<&Path>, record: &str) -> CliResult<()> {
    match out {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(record.as_bytes())
                .and_then(|()| lock.flush())
                .map_err(|source| {
                    CliError::Core(Error::Io {
                        path: "<stdout>".into(),
                        source,
                    })
                })
        }
        Some(path) => Ok(write_atomic(path, record.as_bytes())?),
    }
}

/// Loads, filters and splits the configured dataset, logging each stage.
fn prepared_split(cfg: &RunConfig) -> CliResult<logdpp::SplitDataset> {
    let path = cfg.data_path()?;
    let ds = load_baskets(path, cfg.format)?;
    eprintln!(
        "loaded {} baskets over {} distinct items from {} (mean size {:.2})",
        ds.basket_count(),
        ds.distinct_items(),
        path.display(),
        ds.mean_basket_size()
    );
    let filtered = filter_dataset(
        &ds,
        cfg.min_item_count,
        cfg.min_basket_size,
        cfg.max_basket_size_opt(),
    )?;
    if filtered.basket_count() != ds.basket_count() || filtered.distinct_items() != ds.distinct_items()
    {
        eprintln!(
            "filtering kept {} baskets over {} items",
            filtered.basket_count(),
            filtered.distinct_items()
        );
    }
    let split = split(&filtered, cfg.train_fraction, cfg.seed)?;
    eprintln!(
        "split: {} train / {} test baskets, {} catalog items",
        split.train.len(),
        split.test.len(),
        split.catalog.len()
    );
    Ok(split)
}

/// Trains a model on the configured dataset and writes the model file.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let train_config = cfg.train_config()?;
    let split = prepared_split(cfg)?;
    let (observations, _) = make_examples(&split, cfg.protocol, cfg.negative_ratio, cfg.seed)?;
    eprintln!(
        "built {} training observations (protocol {}, negative ratio {})",
        observations.len(),
        cfg.protocol,
        cfg.negative_ratio
    );
    let mut catalog = split.catalog;
    let alpha = regularization_weights(&catalog, &observations)?;
    catalog.set_alpha(alpha)?;

    let started = Instant::now();
    let (params, report) = train_with_progress(
        cfg.model,
        &observations,
        &catalog,
        &train_config,
        |stats| {
            eprintln!(
                "epoch {:>3}/{}  log-likelihood {:.6}  skipped {}",
                stats.epoch, train_config.max_epochs, stats.log_likelihood, stats.skipped
            );
        },
    )?;
    eprintln!(
        "{} after {} epochs in {:.2}s",
        if report.converged {
            "converged"
        } else {
            "stopped at the epoch cap"
        },
        report.epochs_run(),
        started.elapsed().as_secs_f64()
    );

    let items = catalog.len();
    let artifact = ModelArtifact::new(cfg.model, catalog.tokens().to_vec(), params)?;
    artifact.save(&cfg.model_file)?;
    eprintln!("model written to {}", cfg.model_file.display());

    let mut record = String::new();
    let _ = writeln!(record, "model = {}", cfg.model);
    let _ = writeln!(record, "items = {items}");
    let _ = writeln!(record, "rank = {}", cfg.rank);
    let _ = writeln!(record, "observations = {}", observations.len());
    let _ = writeln!(record, "epochs = {}", report.epochs_run());
    let _ = writeln!(record, "converged = {}", report.converged);
    let _ = writeln!(
        record,
        "final_log_likelihood = {}",
        report.final_log_likelihood
    );
    let _ = writeln!(record, "skipped = {}", report.total_skipped);
    let _ = writeln!(record, "model_file = {}", cfg.model_file.display());
    emit(cfg.out.as_deref(), &record)
}

/// Evaluates a model file on the held-out split of the configured dataset.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let artifact = ModelArtifact::load(&cfg.model_file)?;
    let model_catalog = artifact.catalog()?;
    eprintln!(
        "loaded {} model over {} items from {}",
        artifact.kind,
        model_catalog.len(),
        cfg.model_file.display()
    );
    let split = prepared_split(cfg)?;

    // Test baskets are re-expressed in the model's vocabulary; items the
    // model has never seen cannot be scored and are dropped.
    let mut dropped_items = 0usize;
    let mut dropped_baskets = 0usize;
    let mut baskets: Vec<Vec<usize>> = Vec::with_capacity(split.test.len());
    for basket in &split.test {
        let mapped: Vec<usize> = basket
            .iter()
            .filter_map(|&i| {
                let token = split.catalog.token(i).expect("index from this catalog");
                let index = model_catalog.index_of(token);
                if index.is_none() {
                    dropped_items += 1;
                }
                index
            })
            .collect();
        if mapped.len() >= 2 {
            baskets.push(mapped);
        } else {
            dropped_baskets += 1;
        }
    }
    if dropped_items > 0 || dropped_baskets > 0 {
        eprintln!(
            "dropped {dropped_items} unknown items and {dropped_baskets} too-small baskets"
        );
    }
    if baskets.is_empty() {
        return Err(CliError::Core(Error::InvalidInput(
            "no test basket overlaps the model vocabulary in at least 2 items".into(),
        )));
    }

    let cases = make_eval_cases(&baskets, cfg.protocol, split.ordered, cfg.seed)?;
    eprintln!("evaluating {} held-out cases (protocol {})", cases.len(), cfg.protocol);
    let params = &artifact.params;
    let report = evaluate(
        |context| params.completion_scores(context),
        &cases,
        EvalOptions {
            mask_context: cfg.mask_context,
        },
    )?;
    eprintln!("{}", report.table());

    let mut record = String::new();
    let _ = writeln!(record, "model = {}", artifact.kind);
    let _ = writeln!(record, "protocol = {}", cfg.protocol);
    let _ = writeln!(record, "mask_context = {}", cfg.mask_context);
    let _ = writeln!(record, "cases = {}", report.cases);
    let _ = writeln!(record, "mpr = {}", report.mpr);
    let _ = writeln!(record, "precision_at_5 = {}", report.precision_at_5);
    let _ = writeln!(record, "precision_at_10 = {}", report.precision_at_10);
    let _ = writeln!(record, "precision_at_20 = {}", report.precision_at_20);
    emit(cfg.out.as_deref(), &record)
}

/// Suggests items for a partial basket given as comma-separated tokens.
pub fn cmd_complete(cfg: &RunConfig, basket: &str) -> CliResult<()> {
    let artifact = ModelArtifact::load(&cfg.model_file)?;
    let catalog = artifact.catalog()?;
    let tokens: Vec<&str> = basket
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(CliError::Core(Error::InvalidInput(
            "the basket has no items".into(),
        )));
    }
    let mut unknown = Vec::new();
    let mut context = Vec::new();
    for token in tokens {
        match catalog.index_of(token) {
            Some(index) => {
                if !context.contains(&index) {
                    context.push(index);
                }
            }
            None => unknown.push(token),
        }
    }
    if !unknown.is_empty() {
        return Err(CliError::Core(Error::InvalidInput(format!(
            "unknown item token(s): {}",
            unknown.join(", ")
        ))));
    }

    let picks = match &artifact.params {
        ModelParams::Multitask(_) => {
            eprintln!(
                "ranking all targets with the {} model, keeping the top {}",
                artifact.kind, cfg.count
            );
            let mut ranked = artifact.params.rank_targets(&context)?;
            ranked.truncate(cfg.count);
            ranked
        }
        ModelParams::Logistic(_) => {
            eprintln!(
                "greedily extending the basket {} times with the {} model",
                cfg.count, artifact.kind
            );
            artifact.params.greedy_complete(&context, cfg.count)?
        }
    };

    let mut record = String::new();
    for pick in &picks {
        let token = catalog.token(pick.item).expect("index from this catalog");
        let _ = writeln!(record, "{token}\t{}", pick.probability);
    }
    emit(cfg.out.as_deref(), &record)
}

/// What `gradcheck` should run; defaults mirror the documented self-check.
pub struct GradcheckOpts {
    pub kinds: Vec<ModelKind>,
    pub items: usize,
    pub rank: usize,
    pub instances: usize,
    pub h: f64,
}

/// Compares analytic gradients with central finite differences on random
/// instances and fails (exit code 4) when any relative error exceeds 1e-4.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: &GradcheckOpts) -> CliResult<()> {
    const THRESHOLD: f64 = 1e-4;
    let mut record = String::new();
    let _ = writeln!(record, "items = {}", opts.items);
    let _ = writeln!(record, "rank = {}", opts.rank);
    let _ = writeln!(record, "instances = {}", opts.instances);
    let _ = writeln!(record, "h = {}", opts.h);
    let mut worst = 0.0f64;
    for &kind in &opts.kinds {
        let errors = gradient_check(kind, opts.items, opts.rank, opts.instances, opts.h, cfg.seed)?;
        let prefix = kind.to_string().replace('-', "_");
        let mut kind_worst = 0.0f64;
        for (i, e) in errors.iter().enumerate() {
            let _ = writeln!(record, "{prefix}_{i} = {e}");
            kind_worst = kind_worst.max(*e);
        }
        let _ = writeln!(record, "{prefix}_max = {kind_worst}");
        eprintln!("{kind}: max relative gradient error {kind_worst:e} over {} instances", errors.len());
        worst = worst.max(kind_worst);
    }
    let _ = writeln!(record, "threshold = {THRESHOLD}");
    let pass = worst <= THRESHOLD;
    let _ = writeln!(record, "status = {}", if pass { "pass" } else { "fail" });
    emit(cfg.out.as_deref(), &record)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Core(Error::Numerical(format!(
            "gradient check failed: max relative error {worst:e} exceeds {THRESHOLD:e}"
        ))))
    }
}
