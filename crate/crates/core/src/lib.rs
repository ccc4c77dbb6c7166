//! Federated one-shot pruning on toy layered models.
//!
//! Clients prune resource-proportional subsets of layers against private
//! calibration data (saliency mask + least-squares reconstruction); the
//! server merges the sparse layers with ℓ0-norm averaging and expands the
//! merged mask so every layer hits exactly `ceil(s·d)` zeros.

pub mod aggregation;
pub mod calib;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
mod linalg;
pub mod model;
pub mod orchestrator;
pub mod pruner;
pub mod sampler;
pub mod seed;
pub mod transport;

pub use error::{CheckpointError, Error, Result};
pub use model::{apply_mask, measure_sparsity, Activation, LayeredModel, PruneMask, SparsityTarget, WeightMatrix};
