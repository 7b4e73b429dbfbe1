//! Bayesian graph contrastive learning: masked GCN encoders whose edge
//! augmentations carry learned Kumaraswamy posteriors, trained with a
//! two-view contrastive objective, plus Monte-Carlo downstream evaluation.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod graphdata;
pub mod numcore;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(feature = "oracles")]
pub mod oracles;
