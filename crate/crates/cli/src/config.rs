//! Run configuration: documented defaults, a line-oriented `key = value`
//! config file, and flag overrides that win over the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use logdpp::{BasketFormat, Error, ModelKind, Protocol, TrainConfig};

/// A configuration problem: malformed line, unknown key, bad value or a
/// missing required setting. Distinct from data input errors — it maps to
/// its own exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Everything a command run can depend on. Every field has a default; a
/// config file can override any of them and explicit flags win over both.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Basket dataset path (required by `train` and `eval`).
    pub data: Option<PathBuf>,
    /// Dataset layout on disk.
    pub format: BasketFormat,
    /// Model family to train.
    pub model: ModelKind,
    /// Latent dimensions per item.
    pub rank: usize,
    /// Score weight of the probability link.
    pub w: f64,
    /// Global regularization strength.
    pub alpha0: f64,
    /// Gradient step size.
    pub step: f64,
    /// Momentum coefficient in [0, 1).
    pub momentum: f64,
    /// Observations per gradient step.
    pub minibatch: usize,
    /// Cap on full passes over the data.
    pub max_epochs: usize,
    /// Relative epoch-end improvement below which training stops.
    pub convergence_tol: f64,
    /// Sampled failure observations per success observation.
    pub negative_ratio: f64,
    /// Seed for every random choice in the run.
    pub seed: u64,
    /// Hold-out protocol for training examples and test cases.
    pub protocol: Protocol,
    /// Fraction of baskets that become the training split.
    pub train_fraction: f64,
    /// Items in fewer baskets than this are dropped (0 keeps everything).
    pub min_item_count: usize,
    /// Baskets smaller than this are dropped.
    pub min_basket_size: usize,
    /// Baskets larger than this are dropped (0 means unlimited).
    pub max_basket_size: usize,
    /// Worker threads for parallel sections (0 uses all cores).
    pub workers: usize,
    /// Push context items to the bottom of eval rankings.
    pub mask_context: bool,
    /// Write the machine-readable result here instead of standard output.
    pub out: Option<PathBuf>,
    /// Where the trained model is written to or read from.
    pub model_file: PathBuf,
    /// Completion items to return.
    pub count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            format: BasketFormat::BasketLines,
            model: ModelKind::Multitask,
            rank: 50,
            w: 0.01,
            alpha0: 1.0,
            step: 0.05,
            momentum: 0.9,
            minibatch: 128,
            max_epochs: 60,
            convergence_tol: 1e-4,
            negative_ratio: 1.0,
            seed: 0,
            protocol: Protocol::RandomHoldout,
            train_fraction: 0.7,
            min_item_count: 0,
            min_basket_size: 2,
            max_basket_size: 0,
            workers: 0,
            mask_context: false,
            out: None,
            model_file: PathBuf::from("model.bin"),
            count: 5,
        }
    }
}

impl RunConfig {
    /// Applies a config file on top of the defaults already in `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
        for (number, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "config line {}: expected `key = value`, got '{line}'",
                    number + 1
                )));
            };
            self.apply(key.trim(), value.trim()).map_err(|e| {
                ConfigError(format!("config line {}: {e}", number + 1))
            })?;
        }
        Ok(())
    }

    /// Sets one key from its string form. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| ConfigError(format!("bad value '{value}' for {key}: {e}")))
        }
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "format" => self.format = parse(key, value)?,
            "model" => self.model = parse(key, value)?,
            "rank" => self.rank = parse(key, value)?,
            "w" => self.w = parse(key, value)?,
            "alpha0" => self.alpha0 = parse(key, value)?,
            "step" => self.step = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "minibatch" => self.minibatch = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "convergence_tol" => self.convergence_tol = parse(key, value)?,
            "negative_ratio" => self.negative_ratio = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "protocol" => self.protocol = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "min_item_count" => self.min_item_count = parse(key, value)?,
            "min_basket_size" => self.min_basket_size = parse(key, value)?,
            "max_basket_size" => self.max_basket_size = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "mask_context" => self.mask_context = parse(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "model_file" => self.model_file = PathBuf::from(value),
            "count" => self.count = parse(key, value)?,
            other => {
                return Err(ConfigError(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// The training hyperparameters, validated so range problems surface
    /// as configuration errors before any data is touched.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let tc = TrainConfig {
            rank: self.rank,
            alpha0: self.alpha0,
            step: self.step,
            momentum: self.momentum,
            minibatch: self.minibatch,
            max_epochs: self.max_epochs,
            convergence_tol: self.convergence_tol,
            w: self.w,
            seed: self.seed,
            negative_ratio: self.negative_ratio,
        };
        match tc.validate() {
            Ok(()) => Ok(tc),
            Err(Error::InvalidInput(msg)) => Err(ConfigError(msg)),
            Err(other) => Err(ConfigError(other.to_string())),
        }
    }

    /// The dataset path, required by commands that read data.
    pub fn data_path(&self) -> Result<&Path, ConfigError> {
        self.data
            .as_deref()
            .ok_or_else(|| ConfigError("no dataset given: set --data or the `data` key".into()))
    }

    /// The basket size cap as the option the filter expects.
    pub fn max_basket_size_opt(&self) -> Option<usize> {
        if self.max_basket_size == 0 {
            None
        } else {
            Some(self.max_basket_size)
        }
    }
}
