// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod error;
pub mod fracdiff;
pub mod ingest;
pub mod labeling;
pub mod metrics;
pub mod runner;
pub mod sae;
pub mod stats;
pub mod walkforward;

pub use error::{Error, Result};
