//! Few-shot image classification with class-level regularization.
//!
//! Support features of each class are aggregated over a shared set of trainable
//! semantic bases (soft-assigned residuals), decoded back into the feature space
//! and compared with query features through both a fixed Euclidean metric and a
//! learned relation module.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod class_codec;
pub mod embedding;
pub mod episodic;
pub mod error;
pub mod metric;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
