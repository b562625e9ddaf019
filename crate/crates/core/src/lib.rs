//! Conformal prediction sets that stay valid under adversarial attack.
//!
//! The crate bundles everything the problem needs at desk scale: a small
//! differentiable classifier with analytic gradients, a set of evasion
//! attacks, nonconformity scores with robust variants, split-conformal
//! calibration (including the conservative max-quantile threshold that
//! keeps coverage under whichever attack occurs), and a zero-sum game
//! solver that picks an optimal, possibly mixed, defense from a payoff
//! matrix of mean prediction-set sizes.
//!
//! The `advcp` binary drives three end-to-end pipelines from a flat
//! key-value config file; see the crate README for the file formats and
//! CLI reference.

// Index loops mirror the row/column math throughout, and negated
// comparisons like `!(x > 0.0)` reject NaN along with the out-of-range
// values.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod conformal;
pub mod config;
pub mod dataio;
pub mod game;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scores;
