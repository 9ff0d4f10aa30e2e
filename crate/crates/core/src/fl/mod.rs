//! Toy-scale federated learning: linear and logistic regression trained by
//! full-batch gradient descent on private datasets, federated averaging, and
//! the two-level subgroup/master aggregation tree.

mod aggregate;
mod data;
mod model;
mod train;

use thiserror::Error;

pub use aggregate::{fedavg, master_aggregate, verify_subgroup_mean, SubgroupSum};
pub use data::{
    generate_synthetic_population, ControlDataset, Population, PopulationSpec, PrivateDataset,
    Samples,
};
pub use model::{ModelKind, ModelParams};
pub use train::{gradient, local_train, loss, pooled_loss};

use crate::content_store::StoreError;
use crate::secure_agg::SecureAggError;

#[derive(Debug, Error, PartialEq)]
pub enum FlError {
    #[error("dimension mismatch: model has {model}, data implies {data}")]
    DimensionMismatch { model: usize, data: usize },
    #[error("model kinds differ")]
    KindMismatch,
    #[error("no inputs")]
    EmptyInput,
    #[error("weights must be positive with a positive sum")]
    InvalidWeights,
    #[error("non-finite weights after {0}")]
    NonFinite(&'static str),
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] SecureAggError),
}
