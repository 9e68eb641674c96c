//! Basket completion with determinantal point process models.
//!
//! The crate trains low-rank DPP kernels on shopping-basket data and uses
//! them to rank or greedily pick completion items. Two model families are
//! provided: a single-kernel logistic model that scores whole baskets, and
//! a multi-task variant with one reweighted kernel slice per target item.
//!
//! Modules:
//! - [`kernel`]: factorized kernels, submatrix determinants and inverses
//! - [`model`]: model types, probabilities, likelihoods, ranking and greedy
//!   completion
//! - [`grad`]: analytic likelihood gradients plus finite-difference checks
//! - [`train`]: momentum SGD training loop and initialization
//! - [`data`]: basket file formats, filtering, splitting, example building
//! - [`eval`]: percentile-rank and precision@K evaluation
//! - [`serialize`]: the on-disk model format

pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod kernel;
pub mod model;
pub mod serialize;
pub mod train;

pub use data::{
    filter_dataset, load_baskets, make_eval_cases, make_examples, split, BasketDataset,
    BasketFormat, HoldoutRule, ItemCatalog, Protocol, SplitDataset,
};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalOptions, EvaluationCase, MetricsReport};
pub use grad::{gradient_check, GradientSet, MinibatchGrad};
pub use kernel::{det_and_inverse, determinant, FactorizedKernel, SubmatrixResult};
pub use model::{
    link_probability, LogisticDppModel, ModelKind, ModelParams, MultiTaskDppModel, Observation,
    ScoredItem,
};
pub use serialize::ModelArtifact;
pub use train::{
    initialize, regularization_weights, train, train_with_progress, EpochStats, TrainConfig,
    TrainReport,
};
