//! Weighted predict-and-optimize for distribution-network dispatch.
//!
//! Forecasters are trained under per-node weighted losses, scored by the
//! decision loss they induce in an SOCP dispatch, and the weights are tuned
//! through a graph-convolutional surrogate of that score.

pub mod baselines;
pub mod dispatch;
pub mod error;
pub mod forecaster;
pub mod grid;
pub mod numerics;
pub mod scenarios;
pub mod surrogate;
pub mod wpo;

pub use error::{Error, Result};
