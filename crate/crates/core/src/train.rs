//! Minibatch stochastic gradient ascent with Nesterov momentum: seeded
//! initialization, epoch shuffling, the accumulator update rule, epoch-end
//! likelihood tracking and convergence detection.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::grad::{grad_logistic, grad_multitask, GradientSet};
use crate::model::{
    LogisticDppModel, ModelKind, ModelParams, MultiTaskDppModel, Observation,
};

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of latent dimensions.
    pub rank: usize,
    /// Global regularization strength multiplying the per-item weights.
    pub alpha0: f64,
    /// Gradient step size. Zero is allowed and leaves the model at its
    /// initialization.
    pub step: f64,
    /// Momentum coefficient in `[0, 1)`.
    pub momentum: f64,
    /// Observations per gradient step.
    pub minibatch: usize,
    /// Hard cap on full passes over the data.
    pub max_epochs: usize,
    /// Training stops once the epoch-end objective improves by less than
    /// this, relative to its previous magnitude.
    pub convergence_tol: f64,
    /// Score weight of the probability link.
    pub w: f64,
    /// Seed for initialization and epoch shuffling.
    pub seed: u64,
    /// Failure observations sampled per success when examples are built.
    pub negative_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rank: 50,
            alpha0: 1.0,
            step: 0.05,
            momentum: 0.9,
            minibatch: 128,
            max_epochs: 60,
            convergence_tol: 1e-4,
            w: 0.01,
            seed: 0,
            negative_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(msg));
        if self.rank == 0 {
            return fail("rank must be at least 1".into());
        }
        if !(self.alpha0.is_finite() && self.alpha0 >= 0.0) {
            return fail(format!(
                "regularization strength must be a nonnegative real, got {}",
                self.alpha0
            ));
        }
        if !(self.step.is_finite() && self.step >= 0.0) {
            return fail(format!(
                "step size must be a nonnegative real, got {}",
                self.step
            ));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.minibatch == 0 {
            return fail("minibatch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max epochs must be at least 1".into());
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return fail(format!(
                "convergence tolerance must be a nonnegative real, got {}",
                self.convergence_tol
            ));
        }
        if !(self.w.is_finite() && self.w > 0.0) {
            return fail(format!(
                "score weight must be finite and positive, got {}",
                self.w
            ));
        }
        if !(self.negative_ratio.is_finite() && self.negative_ratio > 0.0) {
            return fail(format!(
                "negative ratio must be a positive real, got {}",
                self.negative_ratio
            ));
        }
        Ok(())
    }
}

/// Objective value and skip count at the end of one full pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Penalized log-likelihood over all observations at epoch end.
    pub log_likelihood: f64,
    /// Observations dropped in this epoch because their submatrix stayed
    /// singular after recovery.
    pub skipped: usize,
}

/// Per-epoch trace and convergence outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// One entry per completed epoch, in order.
    pub epochs: Vec<EpochStats>,
    /// True when the run stopped on the improvement test rather than the
    /// epoch cap.
    pub converged: bool,
    pub final_log_likelihood: f64,
    pub total_skipped: usize,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

/// Per-item regularization weights, inversely proportional to how many
/// observations mention each item (in the item set or as the target):
/// `α_i = mean_count / count_i`, with the mean taken over items that occur
/// at all, and unseen items assigned the largest observed weight.
pub fn regularization_weights(catalog: &ItemCatalog, data: &[Observation]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidInput(
            "cannot derive regularization weights from no observations".into(),
        ));
    }
    let p = catalog.len();
    let mut counts = vec![0u64; p];
    for (m, obs) in data.iter().enumerate() {
        for &i in &obs.items {
            if i >= p {
                return Err(Error::InvalidInput(format!(
                    "observation {m} references item {i} outside the catalog of {p} items"
                )));
            }
            counts[i] += 1;
        }
        if let Some(t) = obs.target {
            if t >= p {
                return Err(Error::InvalidInput(format!(
                    "observation {m} references target {t} outside the catalog of {p} items"
                )));
            }
            counts[t] += 1;
        }
    }
    let observed: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    if observed.is_empty() {
        return Err(Error::InvalidInput(
            "no item occurs in any observation".into(),
        ));
    }
    let mean = observed.iter().sum::<u64>() as f64 / observed.len() as f64;
    let fallback = observed
        .iter()
        .map(|&c| mean / c as f64)
        .fold(0.0, f64::max);
    Ok(counts
        .iter()
        .map(|&c| if c > 0 { mean / c as f64 } else { fallback })
        .collect())
}

/// Draws fresh parameters: embeddings from Normal(0, std 0.1), the
/// diagonal and dimension weights from Normal(1, std 0.1).
///
/// The draw order is fixed — `V` row by row, then the diagonal, then the
/// weight matrix row by row — so a seed pins the exact result. For the
/// no-bias kind the diagonal is exactly zero and consumes no draws.
pub fn initialize(
    kind: ModelKind,
    items: usize,
    rank: usize,
    w: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    if items == 0 || rank == 0 {
        return Err(Error::InvalidInput(
            "initialization needs at least one item and one dimension".into(),
        ));
    }
    let around_zero = Normal::new(0.0, 0.1).expect("valid distribution");
    let around_one = Normal::new(1.0, 0.1).expect("valid distribution");
    let mut v = Array2::zeros((items, rank));
    for i in 0..items {
        for j in 0..rank {
            v[[i, j]] = around_zero.sample(rng);
        }
    }
    let mut d = Array1::zeros(items);
    if kind.uses_bias() {
        for i in 0..items {
            d[i] = around_one.sample(rng);
        }
    }
    if !kind.uses_tasks() {
        return Ok(ModelParams::Logistic(LogisticDppModel::new(v, d, w)?));
    }
    let mut r = Array2::zeros((items, rank));
    for i in 0..items {
        for j in 0..rank {
            r[[i, j]] = around_one.sample(rng);
        }
    }
    Ok(ModelParams::Multitask(MultiTaskDppModel::new(v, d, r, w)?))
}

struct ParamState {
    v: Array2<f64>,
    d: Array1<f64>,
    r: Option<Array2<f64>>,
    w: f64,
}

impl ParamState {
    fn from_params(params: ModelParams) -> Self {
        match params {
            ModelParams::Logistic(m) => ParamState {
                v: m.v,
                d: m.d,
                r: None,
                w: m.w,
            },
            ModelParams::Multitask(m) => ParamState {
                v: m.v,
                d: m.d,
                r: Some(m.r),
                w: m.w,
            },
        }
    }

    /// The model at `θ + β·accumulator`, the point gradients are taken at.
    fn lookahead(&self, accum: &GradientSet, beta: f64) -> ModelParams {
        let mut v = self.v.clone();
        v.scaled_add(beta, &accum.v);
        let mut d = self.d.clone();
        d.scaled_add(beta, &accum.d);
        match &self.r {
            None => ModelParams::Logistic(LogisticDppModel { v, d, w: self.w }),
            Some(r0) => {
                let mut r = r0.clone();
                r.scaled_add(beta, accum.r.as_ref().expect("accumulator shape"));
                ModelParams::Multitask(MultiTaskDppModel {
                    v,
                    d,
                    r,
                    w: self.w,
                })
            }
        }
    }

    fn apply(&mut self, accum: &GradientSet) {
        self.v += &accum.v;
        self.d += &accum.d;
        if let Some(r) = self.r.as_mut() {
            *r += accum.r.as_ref().expect("accumulator shape");
        }
    }

    fn to_params(&self) -> ModelParams {
        match &self.r {
            None => ModelParams::Logistic(LogisticDppModel {
                v: self.v.clone(),
                d: self.d.clone(),
                w: self.w,
            }),
            Some(r) => ModelParams::Multitask(MultiTaskDppModel {
                v: self.v.clone(),
                d: self.d.clone(),
                r: r.clone(),
                w: self.w,
            }),
        }
    }
}

fn validate_observations(
    observations: &[Observation],
    items: usize,
    needs_target: bool,
) -> Result<()> {
    if observations.is_empty() {
        return Err(Error::InvalidInput("no training observations".into()));
    }
    for (m, obs) in observations.iter().enumerate() {
        if obs.items.is_empty() {
            return Err(Error::InvalidInput(format!(
                "observation {m} has an empty item set"
            )));
        }
        for &i in &obs.items {
            if i >= items {
                return Err(Error::InvalidInput(format!(
                    "observation {m} references item {i} outside the catalog of {items} items"
                )));
            }
        }
        match obs.target {
            Some(t) => {
                if t >= items {
                    return Err(Error::InvalidInput(format!(
                        "observation {m} references target {t} outside the catalog of {items} items"
                    )));
                }
                if obs.items.contains(&t) {
                    return Err(Error::InvalidInput(format!(
                        "observation {m} has its target {t} inside its item set"
                    )));
                }
            }
            None => {
                if needs_target {
                    return Err(Error::InvalidInput(format!(
                        "observation {m} has no target but the model kind requires one"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Mid-epoch input errors can only come from parameters having left the
/// finite range (inputs are validated before the loop starts), so they are
/// reported as numerical failures.
fn as_divergence(epoch: usize, err: Error) -> Error {
    match err {
        Error::InvalidInput(msg) => Error::Numerical(format!(
            "training diverged in epoch {epoch}: {msg}"
        )),
        other => other,
    }
}

/// Trains a model of the given kind on fixed observations. See
/// [`train_with_progress`] for the epoch hook variant.
pub fn train(
    kind: ModelKind,
    observations: &[Observation],
    catalog: &ItemCatalog,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_with_progress(kind, observations, catalog, config, |_| {})
}

/// Trains a model, invoking `progress` after every completed epoch.
///
/// Each epoch shuffles the observation order (seeded), walks consecutive
/// minibatch slices, and for each slice applies the momentum update
/// `Ã ← β·Ã + (1−β)·ε·∇(θ + β·Ã)` followed by `θ ← θ + Ã`, where the
/// gradient's penalty term is scaled by the slice's share of the data so a
/// full pass applies it exactly once. Training stops at `max_epochs` or as
/// soon as the epoch-end objective improves by less than
/// `convergence_tol` relative to its previous magnitude. An epoch in which
/// every observation is skipped as singular is an error, as is any
/// divergence to non-finite parameters.
pub fn train_with_progress(
    kind: ModelKind,
    observations: &[Observation],
    catalog: &ItemCatalog,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let items = catalog.len();
    if items == 0 {
        return Err(Error::InvalidInput("empty item catalog".into()));
    }
    validate_observations(observations, items, kind.uses_tasks())?;
    let alpha = catalog.alpha();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut state =
        ParamState::from_params(initialize(kind, items, config.rank, config.w, &mut rng)?);
    let mut accum = GradientSet::zeros(items, config.rank, kind.uses_tasks());

    let total = observations.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        converged: false,
        final_log_likelihood: f64::NAN,
        total_skipped: 0,
    };
    let mut previous: Option<f64> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_skipped = 0usize;
        for slice in order.chunks(config.minibatch) {
            let batch: Vec<Observation> =
                slice.iter().map(|&i| observations[i].clone()).collect();
            let reg_scale = batch.len() as f64 / total as f64;
            let look = state.lookahead(&accum, config.momentum);
            let out = match &look {
                ModelParams::Logistic(m) => {
                    grad_logistic(m, &batch, alpha, config.alpha0, reg_scale)
                }
                ModelParams::Multitask(m) => grad_multitask(
                    m,
                    &batch,
                    alpha,
                    config.alpha0,
                    reg_scale,
                    kind.uses_bias(),
                ),
            }
            .map_err(|e| as_divergence(epoch, e))?;
            epoch_skipped += out.skipped;

            let lr = (1.0 - config.momentum) * config.step;
            accum.v.mapv_inplace(|x| config.momentum * x);
            accum.v.scaled_add(lr, &out.grad.v);
            accum.d.mapv_inplace(|x| config.momentum * x);
            accum.d.scaled_add(lr, &out.grad.d);
            if let Some(ar) = accum.r.as_mut() {
                ar.mapv_inplace(|x| config.momentum * x);
                ar.scaled_add(lr, out.grad.r.as_ref().expect("gradient shape"));
            }
            state.apply(&accum);
        }
        if epoch_skipped >= total {
            return Err(Error::Numerical(format!(
                "every observation was skipped as singular in epoch {epoch}"
            )));
        }
        let log_likelihood = state
            .to_params()
            .penalized_log_likelihood(observations, alpha, config.alpha0)
            .map_err(|e| as_divergence(epoch, e))?;
        let stats = EpochStats {
            epoch,
            log_likelihood,
            skipped: epoch_skipped,
        };
        progress(&stats);
        report.total_skipped += epoch_skipped;
        report.epochs.push(stats);
        if let Some(prev) = previous {
            let relative = (log_likelihood - prev) / prev.abs().max(1.0);
            if relative < config.convergence_tol {
                report.converged = true;
                break;
            }
        }
        previous = Some(log_likelihood);
    }
    report.final_log_likelihood = report
        .epochs
        .last()
        .expect("at least one epoch ran")
        .log_likelihood;
    Ok((state.to_params(), report))
}
