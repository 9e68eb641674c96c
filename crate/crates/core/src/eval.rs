//! Held-out item evaluation: mean percentile rank and precision@K.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// One evaluation instance: the basket remainder shown to the model and
/// the item that was held out of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationCase {
    /// Catalog indices of the items left in the basket.
    pub context: Vec<usize>,
    /// Catalog index of the removed item the model should recover.
    pub held_out: usize,
}

/// Evaluation switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Push context items to the bottom of the ranking before scoring the
    /// held-out item. Off by default: every catalog item competes.
    pub mask_context: bool,
}

/// Aggregate metrics over a set of evaluation cases, all on a 0..=100 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: usize,
    pub mpr: f64,
    pub precision_at_5: f64,
    pub precision_at_10: f64,
    pub precision_at_20: f64,
}

impl MetricsReport {
    /// Two-row table with the usual column layout.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>9} {:>10} {:>10}\n{:>8.2} {:>9.2} {:>10.2} {:>10.2}",
            "MPR",
            "Prec.@5",
            "Prec.@10",
            "Prec.@20",
            self.mpr,
            self.precision_at_5,
            self.precision_at_10,
            self.precision_at_20
        )
    }
}

/// Percentile rank of `held_out` within `scores`: the percentage of items
/// (the held-out one included) whose score does not exceed its own.
/// 100 means the held-out item is ranked best, and ties count in its favor.
pub fn percentile_rank(scores: &[f64], held_out: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty score vector".into()));
    }
    if held_out >= scores.len() {
        return Err(Error::InvalidInput(format!(
            "held-out index {held_out} out of range for {} scores",
            scores.len()
        )));
    }
    let own = scores[held_out];
    let at_or_below = scores.iter().filter(|&&s| own >= s).count();
    Ok(100.0 * at_or_below as f64 / scores.len() as f64)
}

/// Position of `held_out` in a best-first ordering of `scores`, ties broken
/// by ascending item index. 1 is the top rank.
fn rank_of(scores: &[f64], held_out: usize) -> usize {
    let own = scores[held_out];
    let better = scores.iter().filter(|&&s| s > own).count();
    let tied_ahead = scores[..held_out].iter().filter(|&&s| s == own).count();
    1 + better + tied_ahead
}

/// Runs `scorer` over every case and aggregates MPR and precision@{5,10,20}.
///
/// The scorer maps a context to one score per catalog item; higher is
/// better. Cases are scored in parallel but aggregated in case order, so
/// the result does not depend on the worker count. Non-finite scores are
/// reported as an error naming the offending case.
pub fn evaluate<S>(scorer: S, cases: &[EvaluationCase], options: EvalOptions) -> Result<MetricsReport>
where
    S: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if cases.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let per_case: Vec<(f64, usize)> = cases
        .par_iter()
        .enumerate()
        .map(|(index, case)| {
            let mut scores = scorer(&case.context)?;
            if case.held_out >= scores.len() {
                return Err(Error::InvalidInput(format!(
                    "case {index}: held-out index {} out of range for {} scores",
                    case.held_out,
                    scores.len()
                )));
            }
            if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
                return Err(Error::Numerical(format!(
                    "case {index}: non-finite score {} for item {bad}",
                    scores[bad]
                )));
            }
            if options.mask_context {
                for &c in &case.context {
                    if c < scores.len() {
                        scores[c] = f64::NEG_INFINITY;
                    }
                }
            }
            let pr = percentile_rank(&scores, case.held_out)?;
            Ok((pr, rank_of(&scores, case.held_out)))
        })
        .collect::<Result<_>>()?;

    let n = per_case.len() as f64;
    let mpr = per_case.iter().map(|(pr, _)| pr).sum::<f64>() / n;
    let hit = |k: usize| {
        100.0 * per_case.iter().filter(|(_, rank)| *rank <= k).count() as f64 / n
    };
    Ok(MetricsReport {
        cases: per_case.len(),
        mpr,
        precision_at_5: hit(5),
        precision_at_10: hit(10),
        precision_at_20: hit(20),
    })
}
