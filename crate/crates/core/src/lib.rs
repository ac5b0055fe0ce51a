//! Trace-norm constrained matrix-variate Gaussian process regression and a
//! generative list-wise bipartite ranking model built on top of it.
//!
//! - [`kernels`]: graph Laplacians, exponential kernels and kernel bases.
//! - [`meanfit`]: spectral elastic net solver for the posterior mean.
//! - [`posterior`]: closed-form GP posterior, prior sampling, factor GP baseline.
//! - [`ranking`]: ordered-simplex retargeting and the alternating trainer.
//! - [`eval`]: ranking metrics, negative sampling and cross-validation splits.
//! - [`cli`]: batch commands over the on-disk formats in [`io`].

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod meanfit;
pub mod par;
pub mod posterior;
pub mod ranking;

pub use error::{Error, Result};
