//! Meta-learned data rating at desk scale.
//!
//! A rater network scores packed token sequences. It is trained by
//! differentiating a held-out loss through a short unroll of inner
//! language-model updates whose per-example losses are weighted by the
//! softmax of the scores. The trained rater then filters data, either per
//! batch (top-K) or per item with an accept probability derived from the
//! score CDF.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod models;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub mod analysis;
pub mod curation;
pub mod experiments;
pub mod inner;
pub mod meta;
pub mod optim;
pub mod train;
