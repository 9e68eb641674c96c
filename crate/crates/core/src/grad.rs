//! Analytic minibatch gradients of the penalized log-likelihood, their
//! finite-difference oracles, and a self-contained gradient check that
//! compares the two on randomized instances.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{det_and_inverse, determinant};
use crate::model::{
    link_probability, LogisticDppModel, ModelKind, MultiTaskDppModel, Observation, SIGMA_FLOOR,
};

/// Gradients for every parameter block of a model. `r` is present exactly
/// for the per-target family.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub v: Array2<f64>,
    pub d: Array1<f64>,
    pub r: Option<Array2<f64>>,
}

impl GradientSet {
    pub fn zeros(items: usize, rank: usize, with_tasks: bool) -> Self {
        GradientSet {
            v: Array2::zeros((items, rank)),
            d: Array1::zeros(items),
            r: with_tasks.then(|| Array2::zeros((items, rank))),
        }
    }
}

/// A minibatch gradient plus the number of observations that had to be
/// dropped because their submatrix stayed singular even after recovery.
#[derive(Debug, Clone)]
pub struct MinibatchGrad {
    pub grad: GradientSet,
    pub skipped: usize,
}

fn fold_blocks<F: FnMut(f64, f64)>(a: &GradientSet, b: &GradientSet, mut visit: F) -> bool {
    if a.v.dim() != b.v.dim() || a.d.len() != b.d.len() || a.r.is_some() != b.r.is_some() {
        return false;
    }
    for (x, y) in a.v.iter().zip(b.v.iter()) {
        visit(*x, *y);
    }
    for (x, y) in a.d.iter().zip(b.d.iter()) {
        visit(*x, *y);
    }
    if let (Some(ar), Some(br)) = (&a.r, &b.r) {
        if ar.dim() != br.dim() {
            return false;
        }
        for (x, y) in ar.iter().zip(br.iter()) {
            visit(*x, *y);
        }
    }
    true
}

/// Largest absolute componentwise difference between two gradient sets,
/// or infinity when their structure disagrees.
pub fn max_component_diff(a: &GradientSet, b: &GradientSet) -> f64 {
    let mut worst: f64 = 0.0;
    if !fold_blocks(a, b, |x, y| worst = worst.max((x - y).abs())) {
        return f64::INFINITY;
    }
    worst
}

/// Largest componentwise gap between an analytic gradient and its
/// numerical oracle, each component normalized by `max(1, |analytic|)` so
/// large entries are judged relatively and small ones absolutely.
pub fn max_relative_gap(analytic: &GradientSet, numeric: &GradientSet) -> f64 {
    let mut worst: f64 = 0.0;
    if !fold_blocks(analytic, numeric, |a, n| {
        worst = worst.max((a - n).abs() / a.abs().max(1.0));
    }) {
        return f64::INFINITY;
    }
    worst
}

/// The scalar each observation contributes in front of the determinant
/// derivative: `2 w det (y - σ) / σ`, with `σ` under the same clamp the
/// likelihood applies so the division stays bounded. For a failure this
/// collapses to exactly `-2 w det`.
fn coefficient(label: bool, w: f64, det: f64) -> f64 {
    let sigma =
        link_probability(w * det.max(0.0)).clamp(SIGMA_FLOOR, 1.0 - SIGMA_FLOOR);
    let y = if label { 1.0 } else { 0.0 };
    2.0 * w * det * ((y - sigma) / sigma)
}

/// Largest magnitude a single observation may contribute to any gradient
/// entry. Near a singular submatrix the log-determinant's gradient grows
/// like the inverse's largest entry, which is unbounded; one such
/// observation would otherwise throw the whole run. Entries this large
/// only arise in that regime, so rescaling the offending observation keeps
/// its direction while restoring a usable step size.
const CONTRIBUTION_CAP: f64 = 25.0;

fn cap_contribution(v_rows: &mut Array2<f64>, d_vals: &mut [f64], r_row: Option<&mut Array1<f64>>) {
    let mut magnitude = 0.0f64;
    for x in v_rows.iter().chain(d_vals.iter()) {
        magnitude = magnitude.max(x.abs());
    }
    if let Some(row) = &r_row {
        for x in row.iter() {
            magnitude = magnitude.max(x.abs());
        }
    }
    if magnitude > CONTRIBUTION_CAP {
        let scale = CONTRIBUTION_CAP / magnitude;
        v_rows.mapv_inplace(|x| scale * x);
        for x in d_vals.iter_mut() {
            *x *= scale;
        }
        if let Some(row) = r_row {
            row.mapv_inplace(|x| scale * x);
        }
    }
}

fn check_batch_inputs(alpha: &[f64], items: usize, alpha0: f64, reg_scale: f64) -> Result<()> {
    if alpha.len() != items {
        return Err(Error::InvalidInput(format!(
            "{} regularization weights for {items} items",
            alpha.len()
        )));
    }
    if !(alpha0.is_finite() && alpha0 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "regularization strength must be a nonnegative real, got {alpha0}"
        )));
    }
    if !(reg_scale.is_finite() && reg_scale >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "penalty scale must be a nonnegative real, got {reg_scale}"
        )));
    }
    Ok(())
}

/// Per-observation pieces of a gradient, kept local to the observation's
/// item set so the fold into the dense accumulator stays cheap.
struct ObsContribution {
    set: Vec<usize>,
    v_rows: Array2<f64>,
    d_vals: Vec<f64>,
    /// Task index and its dimension weight gradient row, per-target only.
    r_row: Option<(usize, Array1<f64>)>,
}

fn fold_contributions(
    grad: &mut GradientSet,
    contributions: Vec<Result<Option<ObsContribution>>>,
) -> Result<usize> {
    let mut skipped = 0;
    for c in contributions {
        match c? {
            None => skipped += 1,
            Some(c) => {
                for (a, &i) in c.set.iter().enumerate() {
                    grad.v.row_mut(i).scaled_add(1.0, &c.v_rows.row(a));
                    grad.d[i] += c.d_vals[a];
                }
                if let Some((task, row)) = c.r_row {
                    grad.r
                        .as_mut()
                        .expect("task gradient block present")
                        .row_mut(task)
                        .scaled_add(1.0, &row);
                }
            }
        }
    }
    Ok(skipped)
}

/// Minibatch gradient of the single-kernel objective, with the penalty
/// term scaled by `reg_scale` (the minibatch's share of the data).
///
/// Observations whose submatrix is singular even after the recovery jitter
/// are skipped and counted rather than failing the whole batch.
pub fn grad_logistic(
    model: &LogisticDppModel,
    batch: &[Observation],
    alpha: &[f64],
    alpha0: f64,
    reg_scale: f64,
) -> Result<MinibatchGrad> {
    check_batch_inputs(alpha, model.items(), alpha0, reg_scale)?;
    let contributions: Vec<Result<Option<ObsContribution>>> = batch
        .par_iter()
        .map(|obs| {
            let set = model.scored_set(obs);
            let sub = model.kernel().submatrix(&set)?;
            let res = match det_and_inverse(&sub) {
                Ok(res) => res,
                Err(Error::SingularKernel) => return Ok(None),
                Err(e) => return Err(e),
            };
            if res.det <= 0.0 {
                return Ok(None);
            }
            let c = coefficient(obs.label, model.w, res.det);
            let v_a = model.v.select(Axis(0), &set);
            let mut v_rows = res.inverse.dot(&v_a);
            let mut d_vals: Vec<f64> = set
                .iter()
                .enumerate()
                .map(|(a, &i)| c * res.inverse[[a, a]] * model.d[i])
                .collect();
            v_rows.mapv_inplace(|x| c * x);
            cap_contribution(&mut v_rows, &mut d_vals, None);
            Ok(Some(ObsContribution {
                set,
                v_rows,
                d_vals,
                r_row: None,
            }))
        })
        .collect();

    let mut grad = GradientSet::zeros(model.items(), model.rank(), false);
    let skipped = fold_contributions(&mut grad, contributions)?;
    let shrink = reg_scale * alpha0;
    for i in 0..model.items() {
        let s = shrink * alpha[i];
        grad.v.row_mut(i).scaled_add(-s, &model.v.row(i));
        grad.d[i] -= s * model.d[i];
    }
    Ok(MinibatchGrad { grad, skipped })
}

/// Minibatch gradient of the per-target objective. With `update_bias`
/// false the diagonal is treated as frozen and its gradient block is
/// zeroed.
pub fn grad_multitask(
    model: &MultiTaskDppModel,
    batch: &[Observation],
    alpha: &[f64],
    alpha0: f64,
    reg_scale: f64,
    update_bias: bool,
) -> Result<MinibatchGrad> {
    check_batch_inputs(alpha, model.items(), alpha0, reg_scale)?;
    let rank = model.rank();
    let contributions: Vec<Result<Option<ObsContribution>>> = batch
        .par_iter()
        .map(|obs| {
            let task = obs.target.ok_or_else(|| {
                Error::InvalidInput("per-target observations need a target item".into())
            })?;
            let kernel = model.task_kernel(task)?;
            let sub = kernel.submatrix(&obs.items)?;
            let res = match det_and_inverse(&sub) {
                Ok(res) => res,
                Err(Error::SingularKernel) => return Ok(None),
                Err(e) => return Err(e),
            };
            if res.det <= 0.0 {
                return Ok(None);
            }
            let c = coefficient(obs.label, model.w, res.det);
            let v_a = model.v.select(Axis(0), &obs.items);
            let gv = res.inverse.dot(&v_a);
            let mut v_rows = gv.clone();
            let mut r_row = Array1::zeros(rank);
            for k in 0..rank {
                let rk = model.r[[task, k]];
                let mut quad = 0.0;
                for a in 0..obs.items.len() {
                    quad += v_a[[a, k]] * gv[[a, k]];
                }
                r_row[k] = c * rk * quad;
                let factor = c * rk * rk;
                v_rows.column_mut(k).mapv_inplace(|x| factor * x);
            }
            let mut d_vals: Vec<f64> = obs
                .items
                .iter()
                .enumerate()
                .map(|(a, &i)| c * res.inverse[[a, a]] * model.d[i])
                .collect();
            cap_contribution(&mut v_rows, &mut d_vals, Some(&mut r_row));
            Ok(Some(ObsContribution {
                set: obs.items.clone(),
                v_rows,
                d_vals,
                r_row: Some((task, r_row)),
            }))
        })
        .collect();

    let mut grad = GradientSet::zeros(model.items(), rank, true);
    let skipped = fold_contributions(&mut grad, contributions)?;
    let shrink = reg_scale * alpha0;
    let r_grad = grad.r.as_mut().expect("task gradient block present");
    for i in 0..model.items() {
        let s = shrink * alpha[i];
        grad.v.row_mut(i).scaled_add(-s, &model.v.row(i));
        grad.d[i] -= s * model.d[i];
        r_grad.row_mut(i).scaled_add(-s, &model.r.row(i));
    }
    if !update_bias {
        grad.d.fill(0.0);
    }
    Ok(MinibatchGrad { grad, skipped })
}

/// Central-difference gradient of the single-kernel objective, the
/// independent oracle for [`grad_logistic`]. The objective is evaluated
/// through the likelihood alone; no analytic derivative code is shared.
pub fn finite_diff_logistic(
    model: &LogisticDppModel,
    batch: &[Observation],
    alpha: &[f64],
    alpha0: f64,
    reg_scale: f64,
    h: f64,
) -> Result<GradientSet> {
    let objective = |m: &LogisticDppModel| -> Result<f64> {
        let (data, penalty) = m.log_likelihood_parts(batch, alpha, alpha0)?;
        Ok(data - reg_scale * penalty)
    };
    let mut grad = GradientSet::zeros(model.items(), model.rank(), false);
    for i in 0..model.items() {
        for j in 0..model.rank() {
            let mut hi = model.clone();
            hi.v[[i, j]] += h;
            let mut lo = model.clone();
            lo.v[[i, j]] -= h;
            grad.v[[i, j]] = (objective(&hi)? - objective(&lo)?) / (2.0 * h);
        }
        let mut hi = model.clone();
        hi.d[i] += h;
        let mut lo = model.clone();
        lo.d[i] -= h;
        grad.d[i] = (objective(&hi)? - objective(&lo)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference gradient of the per-target objective, the oracle for
/// [`grad_multitask`]. With `update_bias` false the diagonal block is left
/// at zero, mirroring the frozen parameter.
pub fn finite_diff_multitask(
    model: &MultiTaskDppModel,
    batch: &[Observation],
    alpha: &[f64],
    alpha0: f64,
    reg_scale: f64,
    h: f64,
    update_bias: bool,
) -> Result<GradientSet> {
    let objective = |m: &MultiTaskDppModel| -> Result<f64> {
        let (data, penalty) = m.log_likelihood_parts(batch, alpha, alpha0)?;
        Ok(data - reg_scale * penalty)
    };
    let mut grad = GradientSet::zeros(model.items(), model.rank(), true);
    let r_grad = grad.r.as_mut().expect("task gradient block present");
    for i in 0..model.items() {
        for j in 0..model.rank() {
            let mut hi = model.clone();
            hi.v[[i, j]] += h;
            let mut lo = model.clone();
            lo.v[[i, j]] -= h;
            grad.v[[i, j]] = (objective(&hi)? - objective(&lo)?) / (2.0 * h);

            let mut hi = model.clone();
            hi.r[[i, j]] += h;
            let mut lo = model.clone();
            lo.r[[i, j]] -= h;
            r_grad[[i, j]] = (objective(&hi)? - objective(&lo)?) / (2.0 * h);
        }
        if update_bias {
            let mut hi = model.clone();
            hi.d[i] += h;
            let mut lo = model.clone();
            lo.d[i] -= h;
            grad.d[i] = (objective(&hi)? - objective(&lo)?) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Compares analytic and central-difference gradients on `instances`
/// randomized models and minibatches, returning the largest normalized
/// componentwise gap (see [`max_relative_gap`]) per instance. Instances
/// are drawn deterministically from `seed`, with parameters kept well away
/// from singular configurations so both sides differentiate the same
/// smooth objective.
pub fn gradient_check(
    kind: ModelKind,
    items: usize,
    rank: usize,
    instances: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if items < 3 || rank == 0 {
        return Err(Error::InvalidInput(
            "gradient check needs at least 3 items and a positive rank".into(),
        ));
    }
    if !kind.uses_bias() && rank < 2 {
        return Err(Error::InvalidInput(
            "checking a model without a diagonal needs rank at least 2".into(),
        ));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut diffs = Vec::with_capacity(instances);
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(instance as u64));
        let mut v = Array2::zeros((items, rank));
        for i in 0..items {
            for j in 0..rank {
                v[[i, j]] = rng.random_range(-0.8..0.8);
            }
        }
        let mut d = Array1::zeros(items);
        if kind.uses_bias() {
            for i in 0..items {
                d[i] = rng.random_range(0.4..1.2);
            }
        }
        let mut r = Array2::zeros((items, rank));
        for i in 0..items {
            for j in 0..rank {
                r[[i, j]] = rng.random_range(0.3..1.1);
            }
        }
        let mut alpha = vec![0.0; items];
        for a in alpha.iter_mut() {
            *a = rng.random_range(0.5..2.0);
        }
        let alpha0 = 1.0;
        let reg_scale = 0.5;
        let w = 0.05;

        // Without a diagonal the kernel has rank at most `rank`, so keep
        // the scored sets small enough to stay invertible.
        let max_size = if kind.uses_bias() { 5 } else { 5.min(rank) };
        let diff = match kind {
            ModelKind::Logistic => {
                let model = LogisticDppModel::new(v, d, w)?;
                let batch = random_batch(&mut rng, items, 4, max_size, |set, target| {
                    let mut scored = set.to_vec();
                    scored.push(target);
                    let sub = model.kernel().submatrix(&scored)?;
                    Ok(determinant(&sub)? >= MIN_CHECK_DET)
                })?;
                let out = grad_logistic(&model, &batch, &alpha, alpha0, reg_scale)?;
                if out.skipped > 0 {
                    return Err(Error::Numerical(format!(
                        "gradient check instance {instance} produced a singular minibatch"
                    )));
                }
                let fd = finite_diff_logistic(&model, &batch, &alpha, alpha0, reg_scale, h)?;
                max_relative_gap(&out.grad, &fd)
            }
            ModelKind::Multitask | ModelKind::MultitaskNobias => {
                let update_bias = kind.uses_bias();
                let model = MultiTaskDppModel::new(v, d, r, w)?;
                let batch = random_batch(&mut rng, items, 4, max_size, |set, target| {
                    let kernel = model.task_kernel(target)?;
                    let sub = kernel.submatrix(set)?;
                    Ok(determinant(&sub)? >= MIN_CHECK_DET)
                })?;
                let out = grad_multitask(&model, &batch, &alpha, alpha0, reg_scale, update_bias)?;
                if out.skipped > 0 {
                    return Err(Error::Numerical(format!(
                        "gradient check instance {instance} produced a singular minibatch"
                    )));
                }
                let fd = finite_diff_multitask(
                    &model, &batch, &alpha, alpha0, reg_scale, h, update_bias,
                )?;
                max_relative_gap(&out.grad, &fd)
            }
        };
        diffs.push(diff);
    }
    Ok(diffs)
}

/// Smallest determinant a check observation may score. Near-singular sets
/// make the central-difference oracle itself inaccurate — its truncation
/// error grows with the curvature of `ln det` — so candidate sets below
/// this floor are redrawn rather than compared.
const MIN_CHECK_DET: f64 = 0.05;

/// Random labeled observations over distinct items: sets of 2 to
/// `max_size` items plus a target outside the set, alternating
/// success/failure labels. Candidates are redrawn until `well_conditioned`
/// accepts them.
fn random_batch(
    rng: &mut ChaCha8Rng,
    items: usize,
    count: usize,
    max_size: usize,
    mut well_conditioned: impl FnMut(&[usize], usize) -> Result<bool>,
) -> Result<Vec<Observation>> {
    let mut batch = Vec::with_capacity(count);
    for m in 0..count {
        let mut accepted = None;
        for _ in 0..500 {
            let size = rng.random_range(2..=max_size.min(items - 1));
            let mut pool: Vec<usize> = (0..items).collect();
            for i in (1..pool.len()).rev() {
                pool.swap(i, rng.random_range(0..=i));
            }
            let set = pool[..size].to_vec();
            let target = pool[size];
            if well_conditioned(&set, target)? {
                accepted = Some((set, target));
                break;
            }
        }
        let (set, target) = accepted.ok_or_else(|| {
            Error::Numerical("no well-conditioned check observation after 500 draws".into())
        })?;
        batch.push(Observation {
            items: set,
            target: Some(target),
            label: m % 2 == 0,
        });
    }
    Ok(batch)
}
