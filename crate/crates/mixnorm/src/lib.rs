//! Test-time normalization library: per-sample and batch mix-norm layers,
//! ablation variants, an entropy-minimization baseline, and a deterministic
//! synthetic corruption benchmark with a sweep harness.

pub mod augment;
pub mod bench;
pub mod error;
pub mod format;
pub mod harness;
pub mod model;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
