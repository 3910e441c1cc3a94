//! Accuracy-parity training for multi-label group classification.
//!
//! The crate covers the whole pipeline: a small dense network with an
//! analytic backward pass ([`numerics`]), the OE / GAP_MULTI / SOO / CLA
//! objectives ([`losses`]), group-fairness metrics ([`metrics`]), the
//! equalized-odds vs accuracy-parity feasibility checks ([`theory`]),
//! synthetic and CSV datasets ([`data`]), and the training harness
//! ([`trainer`]). The `multigap` binary wraps it all ([`cli`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
