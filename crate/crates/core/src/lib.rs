//! Multi-label few-shot aspect category detection.
//!
//! Episodes of N classes with K support sentences each are encoded by a
//! small CNN; attention over the support set builds denoised class
//! prototypes, attention over each query builds one query vector per
//! prototype, and negative distances are normalized into a class ranking.
//! A Beta-distributed policy learns a per-query decision threshold.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod param;
pub mod tensor;
pub mod threshold;
pub mod training;

pub use error::{Error, Result};
