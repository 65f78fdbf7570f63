//! Self-supervised residual adapters for attention-based multiple instance
//! learning on frozen patch-feature bags.

pub mod adapters;
pub mod augment;
pub mod autodiff;
pub mod bag_store;
pub mod config;
pub mod error;
pub mod eval;
mod h5;
pub mod mil;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod ssl;
pub mod synth;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
