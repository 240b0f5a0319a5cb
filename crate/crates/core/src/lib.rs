//! Probability estimation by minimizing `-ln Φ` over model functions that are
//! normalized by construction.
//!
//! The crate is organised by how normalization is obtained:
//!
//! - [`loss`]: the negative-log loss and discrete (softmax) estimators.
//! - [`heads`]: supervised heads read as conditional densities.
//! - [`flow1d`]: a monotone network whose input-derivative is a density.
//! - [`flownd`]: stacked lower-triangular layers, density = product of diagonals.
//! - [`timeevo`]: densities defined by the time evolution of a node graph.
//! - [`verify`]: closed-form and brute-force references used by the tests.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod config;
pub mod data;
pub mod error;
pub mod flow1d;
pub mod flownd;
pub mod heads;
pub mod loss;
pub mod mlp;
pub mod numeric;
pub mod report;
pub mod timeevo;
mod train;
pub mod verify;

pub use config::{ModelConfig, TrainConfig, TrainMode};
pub use data::{Column, ColumnKind, Dataset};
pub use error::{Error, Result};
pub use report::RunReport;
