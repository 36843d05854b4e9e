//! Summary-statistics Bayesian Bridge regression for polygenic risk scores.
//!
//! The pipeline: estimate block LD from a reference panel ([`ld`]), project
//! GWAS marginal effects onto the retained LD eigenspace, and fit a Bridge
//! shrinkage prior ([`bridge`]) with a block Gibbs sampler whose Gaussian
//! step is solved by prior-preconditioned conjugate gradients ([`gibbs`]).
//! [`simulate`] and [`score`] provide synthetic data with known truth and
//! the tuning/evaluation loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod error;
pub mod gibbs;
pub mod ld;
pub mod linalg;
pub mod rng;
pub mod score;
pub mod simulate;
pub mod summary;

pub use error::{Error, ErrorKind, Result};
