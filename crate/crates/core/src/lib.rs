//! A laboratory for switchable normalization: a small `f64` tensor core,
//! the BN/IN/LN/GN/WN normalizers, the switchable layer that mixes their
//! statistics with learned softmax ratios, a deterministic trainer that
//! emulates per-device batch statistics, and the analytics used to study how
//! the learned ratios evolve.

pub mod analytics;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod norm;
pub mod par;
pub mod shard;
pub mod switchable;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
