//! Federated tabular statistics and distribution-preserving data synthesis.
//!
//! The crate learns low-dimensional global statistics from decentralized
//! tables without pooling raw rows — per-column Gaussian mixtures, category
//! frequencies, and the global covariance of a normalized representation —
//! then synthesizes correlation-preserving fake tables per client so that
//! label-skewed federated data behaves approximately IID during training.
//!
//! Modules follow the pipeline order: [`table`] and [`partition`] model and
//! shard datasets, [`gmm`] fits federated mixtures, [`transforms`] encodes
//! tables into a standard-normal representation, [`covariance`] aggregates
//! moments with optional differential privacy, [`synthesis`] produces fake
//! tables, [`metrics`] and [`train`] score them, [`ledger`] accounts for
//! communication, and [`pipeline`] drives everything end to end.

pub mod artifact;
pub mod covariance;
pub mod error;
pub mod gmm;
pub mod ledger;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod seed;
pub mod synthesis;
pub mod table;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
