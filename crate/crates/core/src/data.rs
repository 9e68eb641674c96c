//! Basket data: file formats, catalog construction, filtering, the
//! train/test split and training example generation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::EvaluationCase;
use crate::model::Observation;

/// Supported basket file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasketFormat {
    /// One basket per line, items separated by commas.
    BasketLines,
    /// CSV with columns `basket_id,item[,position]`; rows are grouped by
    /// basket id and sorted by position when that column is present.
    CsvTransactions,
}

impl FromStr for BasketFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basket-lines" => Ok(BasketFormat::BasketLines),
            "csv-transactions" => Ok(BasketFormat::CsvTransactions),
            other => Err(Error::InvalidInput(format!(
                "unknown basket format '{other}' (expected basket-lines or csv-transactions)"
            ))),
        }
    }
}

impl fmt::Display for BasketFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasketFormat::BasketLines => "basket-lines",
            BasketFormat::CsvTransactions => "csv-transactions",
        })
    }
}

/// Baskets as lists of item tokens, in file order.
///
/// `ordered` records whether the position of items within a basket is
/// known to be addition order; only then can a "last added item" hold-out
/// rule be applied.
#[derive(Debug, Clone)]
pub struct BasketDataset {
    pub baskets: Vec<Vec<String>>,
    pub ordered: bool,
}

impl BasketDataset {
    pub fn basket_count(&self) -> usize {
        self.baskets.len()
    }

    /// Number of distinct item tokens across all baskets.
    pub fn distinct_items(&self) -> usize {
        let mut seen = HashSet::new();
        for basket in &self.baskets {
            for item in basket {
                seen.insert(item.as_str());
            }
        }
        seen.len()
    }

    /// Average number of item entries per basket.
    pub fn mean_basket_size(&self) -> f64 {
        if self.baskets.is_empty() {
            return 0.0;
        }
        let total: usize = self.baskets.iter().map(Vec::len).sum();
        total as f64 / self.baskets.len() as f64
    }
}

/// Dense item index over the training vocabulary.
///
/// Items are numbered in order of first appearance. `counts` holds how
/// many training baskets contain each item and `alpha` the per-item
/// regularization weights (all 1 until a trainer computes real ones).
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    alpha: Vec<f64>,
}

impl ItemCatalog {
    /// Builds a catalog from token baskets, numbering items by first
    /// appearance and counting basket membership.
    pub fn from_baskets(baskets: &[Vec<String>]) -> Self {
        let mut catalog = ItemCatalog {
            tokens: Vec::new(),
            index: HashMap::new(),
            counts: Vec::new(),
            alpha: Vec::new(),
        };
        for basket in baskets {
            let mut seen_here = HashSet::new();
            for token in basket {
                let idx = catalog.intern(token);
                if seen_here.insert(idx) {
                    catalog.counts[idx] += 1;
                }
            }
        }
        catalog
    }

    /// Catalog over a fixed token list with no count information, e.g. the
    /// header of a stored model.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token '{t}'")));
            }
        }
        let n = tokens.len();
        Ok(ItemCatalog {
            tokens,
            index,
            counts: vec![0; n],
            alpha: vec![1.0; n],
        })
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        self.counts.push(0);
        self.alpha.push(1.0);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Training baskets containing the item.
    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    /// Per-item regularization weights.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Installs computed regularization weights; they must be finite,
    /// strictly positive and cover every item.
    pub fn set_alpha(&mut self, alpha: Vec<f64>) -> Result<()> {
        if alpha.len() != self.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} items",
                alpha.len(),
                self.tokens.len()
            )));
        }
        if !alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(Error::InvalidInput(
                "regularization weights must be finite and positive".into(),
            ));
        }
        self.alpha = alpha;
        Ok(())
    }
}

/// Loads a basket file in the given format.
pub fn load_baskets(path: &Path, format: BasketFormat) -> Result<BasketDataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        BasketFormat::BasketLines => parse_basket_lines(&text),
        BasketFormat::CsvTransactions => parse_csv_transactions(&text),
    }
}

fn parse_basket_lines(text: &str) -> Result<BasketDataset> {
    let mut baskets = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let lineno = i as u64 + 1;
        let mut basket = Vec::new();
        for token in line.split(',') {
            if token.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "empty item token".into(),
                });
            }
            basket.push(token.to_string());
        }
        baskets.push(basket);
    }
    if baskets.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "empty file: no baskets".into(),
        });
    }
    Ok(BasketDataset {
        baskets,
        ordered: false,
    })
}

fn parse_csv_transactions(text: &str) -> Result<BasketDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad csv header: {e}"),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("basket_id").ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing required column basket_id".into(),
    })?;
    let item_col = col("item").ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing required column item".into(),
    })?;
    let pos_col = col("position");

    let mut slots: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<(i64, String)>> = Vec::new();
    let mut seen_positions: HashSet<(usize, i64)> = HashSet::new();
    let mut row_counter: i64 = 0;

    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or(0),
            message: format!("bad csv record: {e}"),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(id_col).unwrap_or("");
        let item = record.get(item_col).unwrap_or("");
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty basket_id".into(),
            });
        }
        if item.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty item token".into(),
            });
        }
        let position = match pos_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("");
                raw.parse::<i64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad position value '{raw}'"),
                })?
            }
            None => {
                // Keep file order within the basket.
                row_counter += 1;
                row_counter
            }
        };
        let slot = match slots.get(id) {
            Some(&s) => s,
            None => {
                let s = groups.len();
                slots.insert(id.to_string(), s);
                groups.push(Vec::new());
                s
            }
        };
        if pos_col.is_some() && !seen_positions.insert((slot, position)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate position {position} for basket_id '{id}'"),
            });
        }
        groups[slot].push((position, item.to_string()));
    }

    if groups.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "empty file: no baskets".into(),
        });
    }
    let baskets = groups
        .into_iter()
        .map(|mut g| {
            g.sort_by_key(|(pos, _)| *pos);
            g.into_iter().map(|(_, item)| item).collect()
        })
        .collect();
    Ok(BasketDataset {
        baskets,
        ordered: pos_col.is_some(),
    })
}

fn dedup_keep_first(basket: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    basket
        .iter()
        .filter(|t| seen.insert(t.as_str()))
        .cloned()
        .collect()
}

/// Removes rare items and out-of-range baskets until the dataset is stable.
///
/// Repeated items within a basket are dropped first (keeping the first
/// occurrence). Then, iteratively: items contained in fewer than
/// `min_item_count` baskets are removed from all baskets, and baskets whose
/// size leaves `min_basket_size..=max_basket_size` are removed, until a
/// fixed point. The function is idempotent.
pub fn filter_dataset(
    ds: &BasketDataset,
    min_item_count: usize,
    min_basket_size: usize,
    max_basket_size: Option<usize>,
) -> Result<BasketDataset> {
    let max = max_basket_size.unwrap_or(usize::MAX);
    if max < min_basket_size {
        return Err(Error::InvalidInput(format!(
            "max basket size {max} below min basket size {min_basket_size}"
        )));
    }
    let mut baskets: Vec<Vec<String>> = ds.baskets.iter().map(|b| dedup_keep_first(b)).collect();
    loop {
        let mut changed = false;
        if min_item_count > 0 {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for basket in &baskets {
                for item in basket {
                    *counts.entry(item.as_str()).or_insert(0) += 1;
                }
            }
            let rare: HashSet<String> = counts
                .iter()
                .filter(|(_, &c)| c < min_item_count)
                .map(|(t, _)| t.to_string())
                .collect();
            if !rare.is_empty() {
                for basket in &mut baskets {
                    basket.retain(|t| !rare.contains(t));
                }
                changed = true;
            }
        }
        let before = baskets.len();
        baskets.retain(|b| b.len() >= min_basket_size && b.len() <= max);
        if baskets.len() != before {
            changed = true;
        }
        if !changed {
            break;
        }
    }
    if baskets.is_empty() {
        return Err(Error::InvalidInput(
            "filtering removed every basket".into(),
        ));
    }
    Ok(BasketDataset {
        baskets,
        ordered: ds.ordered,
    })
}

/// A seeded train/test partition with the training vocabulary applied.
///
/// Baskets are stored as catalog indices. Test baskets have items outside
/// the training catalog dropped, and test baskets left with fewer than two
/// items are discarded entirely.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub catalog: ItemCatalog,
    pub ordered: bool,
}

/// Splits baskets into train and test by a seeded uniform permutation; the
/// first `ceil(train_fraction * n)` permuted baskets become the training
/// set. The catalog (and later the regularization weights) comes from the
/// training side only. Repeated items within a basket are collapsed to
/// their first occurrence.
pub fn split(ds: &BasketDataset, train_fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = ds.baskets.len();
    let n_train = (train_fraction * n as f64).ceil() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidInput(format!(
            "degenerate split: {n_train} train / {} test baskets",
            n - n_train.min(n)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let train_token: Vec<Vec<String>> = order[..n_train]
        .iter()
        .map(|&i| dedup_keep_first(&ds.baskets[i]))
        .collect();
    let catalog = ItemCatalog::from_baskets(&train_token);
    let train: Vec<Vec<usize>> = train_token
        .iter()
        .map(|b| b.iter().map(|t| catalog.index_of(t).unwrap()).collect())
        .collect();

    let mut test = Vec::new();
    for &i in &order[n_train..] {
        let basket: Vec<usize> = dedup_keep_first(&ds.baskets[i])
            .iter()
            .filter_map(|t| catalog.index_of(t))
            .collect();
        if basket.len() >= 2 {
            test.push(basket);
        }
    }
    if test.is_empty() {
        return Err(Error::InvalidInput(
            "no test baskets with at least 2 known items after the split".into(),
        ));
    }
    Ok(SplitDataset {
        train,
        test,
        catalog,
        ordered: ds.ordered,
    })
}

/// How the held-out item is chosen within a basket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldoutRule {
    /// Uniformly random position.
    Random,
    /// The last item, which requires addition-ordered baskets.
    Last,
}

/// Hold-out protocol for building training observations and test cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Random hold-out on both sides.
    RandomHoldout,
    /// Last-added hold-out on both sides.
    LastItemHoldout,
    /// Random hold-out for training, last-added for test.
    Mixed,
}

impl Protocol {
    pub fn train_rule(&self) -> HoldoutRule {
        match self {
            Protocol::LastItemHoldout => HoldoutRule::Last,
            _ => HoldoutRule::Random,
        }
    }

    pub fn test_rule(&self) -> HoldoutRule {
        match self {
            Protocol::RandomHoldout => HoldoutRule::Random,
            _ => HoldoutRule::Last,
        }
    }

    /// True when either side needs addition-ordered baskets.
    pub fn needs_order(&self) -> bool {
        self.train_rule() == HoldoutRule::Last || self.test_rule() == HoldoutRule::Last
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Protocol::RandomHoldout),
            "last-item" => Ok(Protocol::LastItemHoldout),
            "mixed" => Ok(Protocol::Mixed),
            other => Err(Error::InvalidInput(format!(
                "unknown protocol '{other}' (expected random, last-item or mixed)"
            ))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::RandomHoldout => "random",
            Protocol::LastItemHoldout => "last-item",
            Protocol::Mixed => "mixed",
        })
    }
}

fn pick_holdout(rule: HoldoutRule, len: usize, rng: &mut ChaCha8Rng) -> usize {
    match rule {
        HoldoutRule::Random => rng.random_range(0..len),
        HoldoutRule::Last => len - 1,
    }
}

/// Uniform draw from `0..p` excluding the sorted indices in `exclude`.
fn sample_outside(rng: &mut ChaCha8Rng, p: usize, exclude: &[usize]) -> usize {
    let mut candidate = rng.random_range(0..p - exclude.len());
    for &e in exclude {
        if e <= candidate {
            candidate += 1;
        } else {
            break;
        }
    }
    candidate
}

/// Builds training observations and test evaluation cases.
///
/// Per training basket, one item is held out by the protocol's training
/// rule: the remainder becomes the observation's item set, the held-out
/// item its positive target. `floor(negative_ratio)` negatives follow with
/// the same item set and a target drawn uniformly from the catalog minus
/// the full original basket. Negatives are fixed here, not resampled per
/// epoch. Test baskets yield one [`EvaluationCase`] each via the
/// protocol's test rule.
pub fn make_examples(
    split: &SplitDataset,
    protocol: Protocol,
    negative_ratio: f64,
    seed: u64,
) -> Result<(Vec<Observation>, Vec<EvaluationCase>)> {
    if !(negative_ratio >= 0.0 && negative_ratio.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "negative ratio must be a nonnegative real, got {negative_ratio}"
        )));
    }
    if protocol.needs_order() && !split.ordered {
        return Err(Error::Protocol(format!(
            "protocol '{protocol}' holds out the last added item but the dataset is unordered"
        )));
    }
    let p = split.catalog.len();
    let negatives = negative_ratio.floor() as usize;
    let rule = protocol.train_rule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observations = Vec::with_capacity(split.train.len() * (1 + negatives));
    for basket in &split.train {
        if basket.len() < 2 {
            return Err(Error::InvalidInput(
                "holding one item out requires baskets of at least 2 items".into(),
            ));
        }
        if negatives > 0 && basket.len() >= p {
            return Err(Error::InvalidInput(
                "basket covers the entire catalog; no negative targets available".into(),
            ));
        }
        let held = pick_holdout(rule, basket.len(), &mut rng);
        let target = basket[held];
        let mut context = basket.clone();
        context.remove(held);
        let mut sorted = basket.clone();
        sorted.sort_unstable();
        observations.push(Observation {
            items: context.clone(),
            target: Some(target),
            label: true,
        });
        for _ in 0..negatives {
            let neg = sample_outside(&mut rng, p, &sorted);
            observations.push(Observation {
                items: context.clone(),
                target: Some(neg),
                label: false,
            });
        }
    }
    let cases = make_eval_cases(&split.test, protocol, split.ordered, seed)?;
    Ok((observations, cases))
}

/// Builds the test-side evaluation cases only. Uses an RNG stream separate
/// from the training-side sampling, so the cases match the ones
/// [`make_examples`] produces for the same seed.
pub fn make_eval_cases(
    test: &[Vec<usize>],
    protocol: Protocol,
    ordered: bool,
    seed: u64,
) -> Result<Vec<EvaluationCase>> {
    let rule = protocol.test_rule();
    if rule == HoldoutRule::Last && !ordered {
        return Err(Error::Protocol(format!(
            "protocol '{protocol}' holds out the last added item but the dataset is unordered"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut cases = Vec::with_capacity(test.len());
    for basket in test {
        if basket.len() < 2 {
            return Err(Error::InvalidInput(
                "test baskets must keep at least 2 items".into(),
            ));
        }
        let held = pick_holdout(rule, basket.len(), &mut rng);
        let mut context = basket.clone();
        context.remove(held);
        cases.push(EvaluationCase {
            context,
            held_out: basket[held],
        });
    }
    Ok(cases)
}
