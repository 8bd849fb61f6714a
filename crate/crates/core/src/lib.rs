//! Density-guided transferable targeted attacks (easy-sample matching with
//! optional bottleneck-enhanced mixup) and the deep-watermark erasure and
//! tampering harness built on top of them.

pub mod dataset;
pub mod density;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod nn;
pub mod ops;
pub mod screening;
pub mod seed;
pub mod stats;
pub mod toy_lab;
pub mod watermark;

pub use error::{Error, Result};
