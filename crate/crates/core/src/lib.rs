//! Distilled pruning: iterative magnitude pruning whose inner training loop
//! runs on a distilled dataset, plus the tooling used to study the stability
//! of the resulting sparse subnetworks.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`model`], [`optim`]: dense reverse-mode autodiff,
//!   model definitions and masked SGD.
//! - [`data`]: IDX ingestion, blob tasks, keyed epoch orders, dataset containers.
//! - [`train`]: the shared training algorithm and evaluation.
//! - [`mask`], [`prune`]: sparsity masks, magnitude pruning, rewinding and the
//!   IMP / distilled / combined pipelines.
//! - [`distill`]: trajectory-matching dataset distillation.
//! - [`analysis`]: linear mode connectivity, loss landscapes, Hessian
//!   diagonals and synthetic-vs-IMP comparisons.

pub mod analysis;
pub mod data;
pub mod distill;
pub mod error;
pub mod io;
pub mod mask;
pub mod model;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
