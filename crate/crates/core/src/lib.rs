//! Sparse mixture-of-experts ensembles on a small vision transformer.
//!
//! The crate covers routing, sparse and batch-ensemble layers, the model
//! variants built from them, their losses and training loop, evaluation
//! metrics, an analytic cost model and compute-normalized analysis.

pub mod analyzer;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe_layers;
pub mod numerics;
pub mod par;
pub mod routing;
pub mod trainer;

pub use error::{Error, Result};
