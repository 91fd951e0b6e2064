//! MobileXNet monocular depth estimation.
//!
//! Layers and model assembly sit on top of the `mobilex-tensor` autodiff
//! core. The rest of the crate covers losses, evaluation metrics, the data
//! pipeline, training and checkpointing, and accuracy/latency Pareto fronts.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pareto;

pub use error::{Category, Error, Result};
pub use mobilex_tensor as tensor;
