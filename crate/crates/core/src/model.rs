//! Basket-completion models: a single-kernel variant whose success
//! probability is a saturating function of a principal-minor determinant,
//! and a per-target variant that reweights the latent dimensions for each
//! candidate target item.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{determinant, FactorizedKernel};

/// Clamp applied to success probabilities inside log-likelihoods so that
/// `ln` stays finite: probabilities are pulled into
/// `[SIGMA_FLOOR, 1 - SIGMA_FLOOR]`.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// The model families the trainer can fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// One shared kernel; a candidate target is scored by appending it to
    /// the item set.
    Logistic,
    /// One kernel per candidate target, sharing embeddings but reweighting
    /// latent dimensions per target.
    Multitask,
    /// The per-target variant with the diagonal bias pinned to zero.
    MultitaskNobias,
}

impl ModelKind {
    /// Whether this family carries per-target dimension weights.
    pub fn uses_tasks(self) -> bool {
        !matches!(self, ModelKind::Logistic)
    }

    /// Whether the diagonal bias is a free parameter.
    pub fn uses_bias(self) -> bool {
        !matches!(self, ModelKind::MultitaskNobias)
    }

    /// Stable one-byte tag used by the model file format.
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Logistic => 0,
            ModelKind::Multitask => 1,
            ModelKind::MultitaskNobias => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ModelKind::Logistic),
            1 => Ok(ModelKind::Multitask),
            2 => Ok(ModelKind::MultitaskNobias),
            other => Err(Error::InvalidInput(format!(
                "unknown model kind tag {other}"
            ))),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "multitask" => Ok(ModelKind::Multitask),
            "multitask-nobias" => Ok(ModelKind::MultitaskNobias),
            other => Err(Error::InvalidInput(format!(
                "unknown model kind '{other}' (expected logistic, multitask or multitask-nobias)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Multitask => "multitask",
            ModelKind::MultitaskNobias => "multitask-nobias",
        })
    }
}

/// One labeled training example: an item set, an optional target item and
/// a success/failure label.
///
/// The single-kernel model scores the union of `items` and `target`; the
/// per-target model scores `items` under the kernel selected by `target`
/// (which it therefore requires).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub items: Vec<usize>,
    pub target: Option<usize>,
    pub label: bool,
}

/// A candidate target with its predicted success probability, as ranked by
/// [`LogisticDppModel::rank_targets`] or [`MultiTaskDppModel::rank_targets`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub item: usize,
    pub probability: f64,
}

/// Saturating link from a nonnegative raw score to a probability in
/// `[0, 1)`: `1 - exp(-score)`, capped just below 1 so that downstream
/// logarithms of the complement stay finite even when the exponential
/// underflows.
pub fn link_probability(score: f64) -> f64 {
    (1.0 - (-score).exp()).min(1.0 - f64::EPSILON / 2.0)
}

fn check_matrix_finite(name: &str, m: &ArrayView2<'_, f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} contains non-finite entries"
        )))
    }
}

fn check_vector_finite(name: &str, v: &ArrayView1<'_, f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} contains non-finite entries"
        )))
    }
}

fn check_weight(w: f64) -> Result<()> {
    if w.is_finite() && w > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "score weight must be finite and positive, got {w}"
        )))
    }
}

fn check_alpha(alpha: &[f64], items: usize) -> Result<()> {
    if alpha.len() != items {
        return Err(Error::InvalidInput(format!(
            "{} regularization weights for {} items",
            alpha.len(),
            items
        )));
    }
    Ok(())
}

/// Orders candidate items by raw score, highest first, breaking ties by
/// ascending item index, skipping `exclude`.
fn rank_by_score(scores: &[f64], exclude: &[usize]) -> Vec<ScoredItem> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|i| !exclude.contains(i))
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| ScoredItem {
            item: i,
            probability: link_probability(scores[i]),
        })
        .collect()
}

fn greedy_by<F>(score_fn: F, context: &[usize], count: usize, p: usize) -> Result<Vec<ScoredItem>>
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    let available = p.saturating_sub(context.len());
    if count > available {
        return Err(Error::InvalidInput(format!(
            "cannot pick {count} items: only {available} candidates outside the context"
        )));
    }
    let mut current = context.to_vec();
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let scores = score_fn(&current)?;
        match rank_by_score(&scores, &current).into_iter().next() {
            Some(best) => {
                current.push(best.item);
                picks.push(best);
            }
            None => break,
        }
    }
    Ok(picks)
}

/// Single-kernel model: success probability of an item set `A` is
/// `1 - exp(-w * max(det M_A, 0))` for the principal submatrix `M_A` of
/// `V Vᵀ + diag(d)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticDppModel {
    pub(crate) v: Array2<f64>,
    pub(crate) d: Array1<f64>,
    pub(crate) w: f64,
}

impl LogisticDppModel {
    pub fn new(v: Array2<f64>, d: Array1<f64>, w: f64) -> Result<Self> {
        if d.len() != v.nrows() {
            return Err(Error::InvalidInput(format!(
                "diagonal length {} does not match {} embedding rows",
                d.len(),
                v.nrows()
            )));
        }
        check_matrix_finite("embedding matrix", &v.view())?;
        check_vector_finite("diagonal", &d.view())?;
        check_weight(w)?;
        Ok(Self { v, d, w })
    }

    /// Number of items in the catalog.
    pub fn items(&self) -> usize {
        self.v.nrows()
    }

    /// Number of latent dimensions.
    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    /// The score weight `w`.
    pub fn weight(&self) -> f64 {
        self.w
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.v.view()
    }

    pub fn diag(&self) -> ArrayView1<'_, f64> {
        self.d.view()
    }

    /// The kernel in factorized form.
    pub fn kernel(&self) -> FactorizedKernel<'_> {
        FactorizedKernel::new(self.v.view(), self.d.view(), None)
            .expect("shapes validated at construction")
    }

    /// Probability that the item set is observed as a success. A singular
    /// submatrix gives probability exactly 0.
    pub fn success_probability(&self, items: &[usize]) -> Result<f64> {
        let det = determinant(&self.kernel().submatrix(items)?)?;
        Ok(link_probability(self.w * det.max(0.0)))
    }

    /// Raw completion scores `w * max(det, 0)` for every catalog item: the
    /// score of candidate `i` uses the set `context + {i}`, and items
    /// already in the context score as the bare context does.
    ///
    /// Raw scores rank identically to probabilities (the link is
    /// monotone) but never saturate into ties.
    pub fn completion_scores(&self, context: &[usize]) -> Result<Vec<f64>> {
        let kernel = self.kernel();
        let base = determinant(&kernel.submatrix(context)?)?.max(0.0);
        let mut set = Vec::with_capacity(context.len() + 1);
        set.extend_from_slice(context);
        set.push(0);
        let mut scores = Vec::with_capacity(self.items());
        for i in 0..self.items() {
            if context.contains(&i) {
                scores.push(self.w * base);
            } else {
                *set.last_mut().unwrap() = i;
                let det = determinant(&kernel.submatrix(&set)?)?;
                scores.push(self.w * det.max(0.0));
            }
        }
        Ok(scores)
    }

    /// Candidate targets outside the context, best first.
    pub fn rank_targets(&self, context: &[usize]) -> Result<Vec<ScoredItem>> {
        Ok(rank_by_score(&self.completion_scores(context)?, context))
    }

    /// Extends the context greedily, re-scoring after each pick. Returns
    /// the picked items with the probability each had when picked.
    pub fn greedy_complete(&self, context: &[usize], count: usize) -> Result<Vec<ScoredItem>> {
        greedy_by(
            |current| self.completion_scores(current),
            context,
            count,
            self.items(),
        )
    }

    /// Penalized log-likelihood of the observations:
    /// `sum_m [y ln σ + (1-y) ln(1-σ)] - (α₀/2) Σ_i α_i (‖V_i‖² + d_i²)`
    /// with each `σ` clamped to `[SIGMA_FLOOR, 1 - SIGMA_FLOOR]`.
    pub fn penalized_log_likelihood(
        &self,
        observations: &[Observation],
        alpha: &[f64],
        alpha0: f64,
    ) -> Result<f64> {
        let (data, penalty) = self.log_likelihood_parts(observations, alpha, alpha0)?;
        Ok(data - penalty)
    }

    /// Data term and (unsubtracted, unscaled) penalty term of the
    /// objective, separated so minibatch code can rescale the penalty.
    pub(crate) fn log_likelihood_parts(
        &self,
        observations: &[Observation],
        alpha: &[f64],
        alpha0: f64,
    ) -> Result<(f64, f64)> {
        check_alpha(alpha, self.items())?;
        let terms: Vec<f64> = observations
            .par_iter()
            .map(|obs| {
                let set = self.scored_set(obs);
                let det = determinant(&self.kernel().submatrix(&set)?)?;
                Ok(bernoulli_term(
                    obs.label,
                    link_probability(self.w * det.max(0.0)),
                ))
            })
            .collect::<Result<_>>()?;
        let data = terms.iter().sum();
        let mut penalty = 0.0;
        for i in 0..self.items() {
            let row = self.v.row(i);
            penalty += alpha[i] * (row.dot(&row) + self.d[i] * self.d[i]);
        }
        Ok((data, alpha0 / 2.0 * penalty))
    }

    /// Item set an observation is scored on: the items plus the target,
    /// when one is present.
    pub(crate) fn scored_set(&self, obs: &Observation) -> Vec<usize> {
        let mut set = obs.items.clone();
        if let Some(t) = obs.target {
            set.push(t);
        }
        set
    }
}

/// Per-target model: the kernel for target `t` is
/// `V diag(R_t)² Vᵀ + diag(d)²`, so every target shares the embeddings but
/// weights the latent dimensions its own way. The success probability of
/// an item set under target `t` uses that kernel's principal minor.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDppModel {
    pub(crate) v: Array2<f64>,
    pub(crate) d: Array1<f64>,
    pub(crate) r: Array2<f64>,
    pub(crate) w: f64,
}

impl MultiTaskDppModel {
    pub fn new(v: Array2<f64>, d: Array1<f64>, r: Array2<f64>, w: f64) -> Result<Self> {
        if d.len() != v.nrows() {
            return Err(Error::InvalidInput(format!(
                "diagonal length {} does not match {} embedding rows",
                d.len(),
                v.nrows()
            )));
        }
        if r.dim() != v.dim() {
            return Err(Error::InvalidInput(format!(
                "dimension weight matrix is {:?}, expected {:?} to match the embeddings",
                r.dim(),
                v.dim()
            )));
        }
        check_matrix_finite("embedding matrix", &v.view())?;
        check_vector_finite("diagonal", &d.view())?;
        check_matrix_finite("dimension weight matrix", &r.view())?;
        check_weight(w)?;
        Ok(Self { v, d, r, w })
    }

    pub fn items(&self) -> usize {
        self.v.nrows()
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn weight(&self) -> f64 {
        self.w
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.v.view()
    }

    pub fn diag(&self) -> ArrayView1<'_, f64> {
        self.d.view()
    }

    pub fn task_weights(&self) -> ArrayView2<'_, f64> {
        self.r.view()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.items() {
            return Err(Error::InvalidInput(format!(
                "target index {task} out of range for catalog of {} items",
                self.items()
            )));
        }
        Ok(())
    }

    /// The kernel selected by one target item, in factorized form.
    pub fn task_kernel(&self, task: usize) -> Result<FactorizedKernel<'_>> {
        self.check_task(task)?;
        FactorizedKernel::new(self.v.view(), self.d.view(), Some(self.r.row(task)))
    }

    /// Probability that the item set is observed as a success for the
    /// given target item, which must lie outside the set.
    pub fn success_probability(&self, task: usize, items: &[usize]) -> Result<f64> {
        if items.contains(&task) {
            return Err(Error::InvalidInput(format!(
                "target item {task} is already in the item set"
            )));
        }
        let det = determinant(&self.task_kernel(task)?.submatrix(items)?)?;
        Ok(link_probability(self.w * det.max(0.0)))
    }

    /// Raw scores `w * max(det, 0)` of the context set under every
    /// target's kernel, including targets already in the context.
    pub fn target_scores(&self, context: &[usize]) -> Result<Vec<f64>> {
        (0..self.items())
            .map(|task| {
                let det = determinant(&self.task_kernel(task)?.submatrix(context)?)?;
                Ok(self.w * det.max(0.0))
            })
            .collect()
    }

    /// Candidate targets outside the context, best first.
    pub fn rank_targets(&self, context: &[usize]) -> Result<Vec<ScoredItem>> {
        Ok(rank_by_score(&self.target_scores(context)?, context))
    }

    /// Extends the context greedily, re-scoring after each pick. Returns
    /// the picked items with the probability each had when picked.
    pub fn greedy_complete(&self, context: &[usize], count: usize) -> Result<Vec<ScoredItem>> {
        greedy_by(
            |current| self.target_scores(current),
            context,
            count,
            self.items(),
        )
    }

    /// Penalized log-likelihood; the penalty also covers the per-target
    /// dimension weights:
    /// `- (α₀/2) Σ_i α_i (‖V_i‖² + d_i² + ‖R_i‖²)`.
    pub fn penalized_log_likelihood(
        &self,
        observations: &[Observation],
        alpha: &[f64],
        alpha0: f64,
    ) -> Result<f64> {
        let (data, penalty) = self.log_likelihood_parts(observations, alpha, alpha0)?;
        Ok(data - penalty)
    }

    pub(crate) fn log_likelihood_parts(
        &self,
        observations: &[Observation],
        alpha: &[f64],
        alpha0: f64,
    ) -> Result<(f64, f64)> {
        check_alpha(alpha, self.items())?;
        let terms: Vec<f64> = observations
            .par_iter()
            .map(|obs| {
                let task = obs.target.ok_or_else(|| {
                    Error::InvalidInput(
                        "per-target observations need a target item".into(),
                    )
                })?;
                let det = determinant(&self.task_kernel(task)?.submatrix(&obs.items)?)?;
                Ok(bernoulli_term(
                    obs.label,
                    link_probability(self.w * det.max(0.0)),
                ))
            })
            .collect::<Result<_>>()?;
        let data = terms.iter().sum();
        let mut penalty = 0.0;
        for i in 0..self.items() {
            let vrow = self.v.row(i);
            let rrow = self.r.row(i);
            penalty +=
                alpha[i] * (vrow.dot(&vrow) + self.d[i] * self.d[i] + rrow.dot(&rrow));
        }
        Ok((data, alpha0 / 2.0 * penalty))
    }
}

/// `y ln σ + (1-y) ln(1-σ)` with `σ` clamped away from 0 and 1.
fn bernoulli_term(label: bool, sigma: f64) -> f64 {
    let sigma = sigma.clamp(SIGMA_FLOOR, 1.0 - SIGMA_FLOOR);
    if label {
        sigma.ln()
    } else {
        (1.0 - sigma).ln()
    }
}

/// Trained parameters of either model family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Logistic(LogisticDppModel),
    Multitask(MultiTaskDppModel),
}

impl ModelParams {
    pub fn items(&self) -> usize {
        match self {
            ModelParams::Logistic(m) => m.items(),
            ModelParams::Multitask(m) => m.items(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            ModelParams::Logistic(m) => m.rank(),
            ModelParams::Multitask(m) => m.rank(),
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            ModelParams::Logistic(m) => m.weight(),
            ModelParams::Multitask(m) => m.weight(),
        }
    }

    /// Raw per-item target scores for a context, using whichever scoring
    /// rule the family defines.
    pub fn completion_scores(&self, context: &[usize]) -> Result<Vec<f64>> {
        match self {
            ModelParams::Logistic(m) => m.completion_scores(context),
            ModelParams::Multitask(m) => m.target_scores(context),
        }
    }

    pub fn rank_targets(&self, context: &[usize]) -> Result<Vec<ScoredItem>> {
        match self {
            ModelParams::Logistic(m) => m.rank_targets(context),
            ModelParams::Multitask(m) => m.rank_targets(context),
        }
    }

    pub fn greedy_complete(&self, context: &[usize], count: usize) -> Result<Vec<ScoredItem>> {
        match self {
            ModelParams::Logistic(m) => m.greedy_complete(context, count),
            ModelParams::Multitask(m) => m.greedy_complete(context, count),
        }
    }

    pub fn penalized_log_likelihood(
        &self,
        observations: &[Observation],
        alpha: &[f64],
        alpha0: f64,
    ) -> Result<f64> {
        match self {
            ModelParams::Logistic(m) => m.penalized_log_likelihood(observations, alpha, alpha0),
            ModelParams::Multitask(m) => m.penalized_log_likelihood(observations, alpha, alpha0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1, Array2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simple_logistic() -> LogisticDppModel {
        // Kernel: [[1.25, 0, 1], [0, 1.25, 1], [1, 1, 2.25]].
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let d = arr1(&[0.5, 0.5, 0.5]);
        LogisticDppModel::new(v, d, 0.05).unwrap()
    }

    #[test]
    fn probability_matches_the_closed_form_link() {
        let model = simple_logistic();
        // det over {0, 1} is 1.25 * 1.25 = 1.5625.
        let p = model.success_probability(&[0, 1]).unwrap();
        let expect = 1.0 - (-0.05f64 * 1.5625).exp();
        assert!((p - expect).abs() < 1e-15);
    }

    #[test]
    fn saturated_probability_stays_below_one() {
        let v = Array2::zeros((1, 1));
        let d = arr1(&[2000.0]);
        let model = LogisticDppModel::new(v, d, 1.0).unwrap();
        // det = 4e6; exp(-4e6) underflows to 0.
        let p = model.success_probability(&[0]).unwrap();
        assert!(p < 1.0);
        assert!(p > 1.0 - 1e-15);
    }

    #[test]
    fn singular_set_has_probability_zero() {
        let v = arr2(&[[1.0], [1.0]]);
        let d = arr1(&[0.0, 0.0]);
        let model = LogisticDppModel::new(v, d, 0.01).unwrap();
        assert_eq!(model.success_probability(&[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn likelihood_of_an_impossible_success_hits_the_clamp() {
        let v = arr2(&[[1.0], [1.0]]);
        let d = arr1(&[0.0, 0.0]);
        let model = LogisticDppModel::new(v, d, 0.01).unwrap();
        let obs = [Observation {
            items: vec![0],
            target: Some(1),
            label: true,
        }];
        // With no regularization the whole value is ln(1e-12), the clamp
        // on the impossible success.
        let bare = model
            .penalized_log_likelihood(&obs, &[1.0, 1.0], 0.0)
            .unwrap();
        assert!((bare - (-27.631021115928548)).abs() < 1e-9, "ll = {bare}");
        // With unit weights the penalty (1/2)(1 + 1) = 1 comes off.
        let ll = model
            .penalized_log_likelihood(&obs, &[1.0, 1.0], 1.0)
            .unwrap();
        assert!((ll - (bare - 1.0)).abs() < 1e-12, "ll = {ll}");
    }

    #[test]
    fn all_zero_model_with_no_observations_scores_zero() {
        let model =
            LogisticDppModel::new(Array2::zeros((3, 2)), Array1::zeros(3), 0.01).unwrap();
        assert_eq!(
            model
                .penalized_log_likelihood(&[], &[1.0; 3], 1.0)
                .unwrap(),
            0.0
        );
        let mt = MultiTaskDppModel::new(
            Array2::zeros((3, 2)),
            Array1::zeros(3),
            Array2::zeros((3, 2)),
            0.01,
        )
        .unwrap();
        assert_eq!(
            mt.penalized_log_likelihood(&[], &[1.0; 3], 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_zero_embedding_item_has_the_textbook_probability() {
        // V_i = 0, D_i = 1, w = 0.01: the singleton determinant is 1 and
        // the probability is 1 - exp(-0.01) = 0.00995...
        let v = Array2::zeros((1, 3));
        let d = arr1(&[1.0]);
        let model = LogisticDppModel::new(v, d, 0.01).unwrap();
        let p = model.success_probability(&[0]).unwrap();
        assert!((p - 0.009950166250831893).abs() < 1e-15);
    }

    #[test]
    fn failure_label_contributes_minus_w_det() {
        // For label 0: ln(1 - sigma) = ln(exp(-w det)) = -w det exactly
        // (within the clamp).
        let model = simple_logistic();
        let obs = [Observation {
            items: vec![1],
            target: Some(0),
            label: false,
        }];
        let alpha = [1.0, 1.0, 1.0];
        let (data, _) = model.log_likelihood_parts(&obs, &alpha, 1.0).unwrap();
        assert!((data - (-0.05 * 1.5625)).abs() < 1e-12);
    }

    #[test]
    fn likelihood_matches_a_hand_computation() {
        let model = simple_logistic();
        let obs = [
            Observation {
                items: vec![0],
                target: Some(2),
                label: true,
            },
            Observation {
                items: vec![1],
                target: Some(0),
                label: false,
            },
        ];
        let alpha = [1.0, 1.0, 1.0];
        let ll = model.penalized_log_likelihood(&obs, &alpha, 2.0).unwrap();
        // det{0,2} = 1.25 * 2.25 - 1 = 1.8125; det{1,0} = 1.5625.
        let expect = (1.0 - (-0.05f64 * 1.8125).exp()).ln() - 0.05 * 1.5625
            - (2.0 / 2.0) * (1.25 + 1.25 + 2.25);
        assert!((ll - expect).abs() < 1e-12, "ll = {ll}, expect = {expect}");
    }

    #[test]
    fn empty_observation_list_leaves_only_the_penalty() {
        let model = simple_logistic();
        let ll = model
            .penalized_log_likelihood(&[], &[1.0, 2.0, 3.0], 1.0)
            .unwrap();
        let expect = -0.5 * (1.0 * 1.25 + 2.0 * 1.25 + 3.0 * 2.25);
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn completion_scores_extend_the_context_by_each_candidate() {
        let model = simple_logistic();
        let scores = model.completion_scores(&[0]).unwrap();
        // Candidate 0 is in the context: the bare context scores
        // w * det{0} = 0.05 * 1.25.
        assert!((scores[0] - 0.05 * 1.25).abs() < 1e-15);
        // det{0,1} = 1.5625, det{0,2} = 1.8125.
        assert!((scores[1] - 0.05 * 1.5625).abs() < 1e-15);
        assert!((scores[2] - 0.05 * 1.8125).abs() < 1e-15);
    }

    #[test]
    fn ranking_excludes_the_context_and_breaks_ties_by_index() {
        // Items 1 and 2 are exact copies, so their scores tie and the
        // lower index comes first. Item 3 is colinear with the context
        // item 0, so diversity pushes it below the tied pair:
        // det{0,1} = det{0,2} = 1.01 * 0.29 - 0.25 = 0.0429 while
        // det{0,3} = 1.01 * 4 - 4 = 0.04.
        let v = arr2(&[[1.0], [0.5], [0.5], [2.0]]);
        let d = arr1(&[0.1, 0.2, 0.2, 0.0]);
        let model = LogisticDppModel::new(v, d, 0.01).unwrap();
        let ranked = model.rank_targets(&[0]).unwrap();
        assert_eq!(ranked.len(), 3);
        assert_eq!(ranked[0].item, 1);
        assert_eq!(ranked[1].item, 2);
        assert_eq!(ranked[2].item, 3);
        assert!(ranked.iter().all(|s| s.item != 0));
        assert!(ranked[0].probability == ranked[1].probability);
    }

    #[test]
    fn greedy_completion_adds_distinct_items() {
        let model = simple_logistic();
        let picks = model.greedy_complete(&[0], 2).unwrap();
        assert_eq!(picks.len(), 2);
        let mut seen = vec![0usize];
        for pick in &picks {
            assert!(!seen.contains(&pick.item));
            seen.push(pick.item);
        }
        // Zero picks is legal; asking for more candidates than exist is not.
        assert_eq!(model.greedy_complete(&[0], 0).unwrap(), vec![]);
        assert!(matches!(
            model.greedy_complete(&[0], 3),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn greedy_completion_matches_the_exhaustive_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = 6;
        let mut v = Array2::zeros((p, 2));
        for i in 0..p {
            for j in 0..2 {
                v[[i, j]] = rng.random_range(-1.0..1.0);
            }
        }
        let mut d = Array1::zeros(p);
        for i in 0..p {
            d[i] = rng.random_range(0.2..1.2);
        }
        let model = LogisticDppModel::new(v, d, 0.05).unwrap();
        let context = vec![1, 4];
        let picks = model.greedy_complete(&context, 2).unwrap();

        // Exhaustive oracle: at each of the two steps, enumerate every
        // candidate, score the union through the probability op alone, and
        // take the best (ties toward the lower index).
        let mut current = context.clone();
        let mut oracle = Vec::new();
        for _ in 0..2 {
            let mut best: Option<(usize, f64)> = None;
            for cand in 0..p {
                if current.contains(&cand) {
                    continue;
                }
                let mut set = current.clone();
                set.push(cand);
                let prob = model.success_probability(&set).unwrap();
                let better = match best {
                    None => true,
                    Some((_, b)) => prob > b,
                };
                if better {
                    best = Some((cand, prob));
                }
            }
            let (item, _) = best.unwrap();
            current.push(item);
            oracle.push(item);
        }
        let picked: Vec<usize> = picks.iter().map(|s| s.item).collect();
        assert_eq!(picked, oracle);
    }

    #[test]
    fn multitask_probability_matches_a_full_matrix_oracle() {
        // Reconstruct the full task kernel with naive loops, take the
        // brute-force determinant of the selected block, and compare.
        let model = random_multitask(8, 8, 3, false);
        let items = [1usize, 4, 6];
        for task in [0usize, 3, 7] {
            let mut full = Array2::zeros((8, 8));
            for s in 0..8 {
                for t in 0..8 {
                    let mut e = 0.0;
                    for j in 0..3 {
                        e += model.v[[s, j]]
                            * model.r[[task, j]]
                            * model.r[[task, j]]
                            * model.v[[t, j]];
                    }
                    if s == t {
                        e += model.d[s] * model.d[s];
                    }
                    full[[s, t]] = e;
                }
            }
            let k = items.len();
            let mut block = Array2::zeros((k, k));
            for (a, &s) in items.iter().enumerate() {
                for (b, &t) in items.iter().enumerate() {
                    block[[a, b]] = full[[s, t]];
                }
            }
            // 3x3 determinant by direct cofactor expansion.
            let det = block[[0, 0]]
                * (block[[1, 1]] * block[[2, 2]] - block[[1, 2]] * block[[2, 1]])
                - block[[0, 1]] * (block[[1, 0]] * block[[2, 2]] - block[[1, 2]] * block[[2, 0]])
                + block[[0, 2]] * (block[[1, 0]] * block[[2, 1]] - block[[1, 1]] * block[[2, 0]]);
            let expect = 1.0 - (-model.w * det.max(0.0)).exp();
            let got = model.success_probability(task, &items).unwrap();
            let rel = (got - expect).abs() / expect.abs().max(1e-300);
            assert!(rel < 1e-10, "task {task}: {got} vs oracle {expect}");
        }
    }

    #[test]
    fn likelihoods_match_a_compositional_re_evaluation() {
        // Rebuild both likelihoods from the probability ops plus an
        // explicit penalty sum; nothing of the fused path is reused.
        let mt = random_multitask(9, 6, 3, false);
        let log = LogisticDppModel::new(mt.v.clone(), mt.d.clone(), mt.w).unwrap();
        let obs = [
            Observation {
                items: vec![0, 2],
                target: Some(5),
                label: true,
            },
            Observation {
                items: vec![1, 3, 4],
                target: Some(0),
                label: false,
            },
            Observation {
                items: vec![5],
                target: Some(2),
                label: true,
            },
        ];
        let alpha = [1.3, 0.7, 1.0, 2.0, 0.5, 1.1];
        let alpha0 = 0.8;

        let mut expect_log = 0.0;
        let mut expect_mt = 0.0;
        for o in &obs {
            let mut set = o.items.clone();
            set.push(o.target.unwrap());
            let p_log = log
                .success_probability(&set)
                .unwrap()
                .clamp(1e-12, 1.0 - 1e-12);
            let p_mt = mt
                .success_probability(o.target.unwrap(), &o.items)
                .unwrap()
                .clamp(1e-12, 1.0 - 1e-12);
            expect_log += if o.label { p_log.ln() } else { (1.0 - p_log).ln() };
            expect_mt += if o.label { p_mt.ln() } else { (1.0 - p_mt).ln() };
        }
        for i in 0..6 {
            let v2: f64 = (0..3).map(|j| mt.v[[i, j]] * mt.v[[i, j]]).sum();
            let r2: f64 = (0..3).map(|j| mt.r[[i, j]] * mt.r[[i, j]]).sum();
            expect_log -= alpha0 / 2.0 * alpha[i] * (v2 + mt.d[i] * mt.d[i]);
            expect_mt -= alpha0 / 2.0 * alpha[i] * (v2 + mt.d[i] * mt.d[i] + r2);
        }
        let got_log = log.penalized_log_likelihood(&obs, &alpha, alpha0).unwrap();
        let got_mt = mt.penalized_log_likelihood(&obs, &alpha, alpha0).unwrap();
        assert!((got_log - expect_log).abs() < 1e-10, "{got_log} vs {expect_log}");
        assert!((got_mt - expect_mt).abs() < 1e-10, "{got_mt} vs {expect_mt}");
    }

    fn random_multitask(seed: u64, p: usize, r: usize, unit_weights: bool) -> MultiTaskDppModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((p, r), |_| rng.random_range(-1.0..1.0));
        let d = Array1::from_shape_fn(p, |_| rng.random_range(0.1..1.0));
        let r_mat = if unit_weights {
            Array2::ones((p, r))
        } else {
            Array2::from_shape_fn((p, r), |_| rng.random_range(-1.0..1.0))
        };
        MultiTaskDppModel::new(v, d, r_mat, 0.01).unwrap()
    }

    #[test]
    fn unit_dimension_weights_reduce_to_the_single_kernel_model() {
        let mt = random_multitask(3, 5, 3, true);
        let log =
            LogisticDppModel::new(mt.v.clone(), mt.d.clone(), mt.w).unwrap();
        for task in [1, 3] {
            let p_mt = mt.success_probability(task, &[0, 2, 4]).unwrap();
            let p_log = log.success_probability(&[0, 2, 4]).unwrap();
            assert!((p_mt - p_log).abs() < 1e-14);
        }
        // Likelihoods agree too, up to the extra penalty on the unit
        // dimension weights: each row contributes alpha_i * rank.
        let obs = [
            Observation {
                items: vec![0, 1],
                target: Some(3),
                label: true,
            },
            Observation {
                items: vec![2, 4],
                target: Some(0),
                label: false,
            },
        ];
        let alpha = [1.0; 5];
        let ll_mt = mt.penalized_log_likelihood(&obs, &alpha, 1.0).unwrap();
        let log_obs: Vec<Observation> = obs
            .iter()
            .map(|o| Observation {
                items: o.items.clone(),
                target: None,
                label: o.label,
            })
            .collect();
        let ll_log = log.penalized_log_likelihood(&log_obs, &alpha, 1.0).unwrap();
        let weight_penalty = 0.5 * (5.0 * 3.0);
        assert!((ll_mt - (ll_log - weight_penalty)).abs() < 1e-12);
    }

    #[test]
    fn zero_dimension_weights_leave_a_diagonal_kernel() {
        let v = arr2(&[[1.0], [2.0], [3.0]]);
        let d = arr1(&[0.1, 0.2, 0.3]);
        let r = arr2(&[[1.0], [0.5], [0.0]]);
        let model = MultiTaskDppModel::new(v, d, r, 0.01).unwrap();
        // Task 2 has zero weights: its kernel is diag(d²) and the minor
        // over {0, 1} has determinant 0.01 * 0.04.
        let p = model.success_probability(2, &[0, 1]).unwrap();
        let expect = 1.0 - (-0.01f64 * 0.01 * 0.04).exp();
        assert!((p - expect).abs() < 1e-18);
    }

    #[test]
    fn target_scores_cover_every_task_with_frozen_values() {
        let v = arr2(&[[1.0], [2.0], [3.0]]);
        let d = arr1(&[0.1, 0.2, 0.3]);
        let r = arr2(&[[1.0], [0.5], [0.0]]);
        let model = MultiTaskDppModel::new(v, d, r, 0.01).unwrap();
        let scores = model.target_scores(&[0, 1]).unwrap();
        // Task 0: [[1.01, 2], [2, 4.04]] -> det 0.0804.
        // Task 1: [[0.26, 0.5], [0.5, 1.04]] -> det 0.0204.
        // Task 2: diag(0.01, 0.04) -> det 0.0004.
        assert!((scores[0] - 8.04e-4).abs() < 1e-16);
        assert!((scores[1] - 2.04e-4).abs() < 1e-16);
        assert!((scores[2] - 4.0e-6).abs() < 1e-18);
        let ranked = model.rank_targets(&[0, 1]).unwrap();
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].item, 2);
    }

    #[test]
    fn per_target_observations_require_a_target() {
        let model = random_multitask(1, 4, 2, false);
        let obs = [Observation {
            items: vec![0, 1],
            target: None,
            label: true,
        }];
        assert!(matches!(
            model.penalized_log_likelihood(&obs, &[1.0; 4], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn out_of_range_targets_are_rejected() {
        let model = random_multitask(2, 4, 2, false);
        assert!(model.success_probability(4, &[0]).is_err());
    }

    #[test]
    fn constructor_validates_shapes_and_values() {
        let v = Array2::zeros((3, 2));
        assert!(LogisticDppModel::new(v.clone(), Array1::zeros(2), 0.01).is_err());
        assert!(LogisticDppModel::new(v.clone(), Array1::zeros(3), 0.0).is_err());
        assert!(LogisticDppModel::new(v.clone(), arr1(&[0.0, f64::NAN, 0.0]), 0.01).is_err());
        assert!(MultiTaskDppModel::new(
            v.clone(),
            Array1::zeros(3),
            Array2::zeros((2, 2)),
            0.01
        )
        .is_err());
        assert!(MultiTaskDppModel::new(v, Array1::zeros(3), Array2::zeros((3, 2)), 0.01).is_ok());
    }

    #[test]
    fn alpha_length_is_checked() {
        let model = simple_logistic();
        assert!(model
            .penalized_log_likelihood(&[], &[1.0, 1.0], 1.0)
            .is_err());
    }

    #[test]
    fn params_enum_dispatches_to_the_right_scoring_rule() {
        let mt = random_multitask(5, 4, 2, false);
        let scores_direct = mt.target_scores(&[1]).unwrap();
        let params = ModelParams::Multitask(mt);
        let scores_enum = params.completion_scores(&[1]).unwrap();
        assert_eq!(scores_direct, scores_enum);
        assert_eq!(params.items(), 4);
        assert_eq!(params.rank(), 2);
    }
}
