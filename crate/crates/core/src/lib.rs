//! Metropolis-Hastings sampling with incrementally refined local surrogates.
//!
//! The sampler replaces an expensive forward model (or log-posterior) inside
//! the acceptance ratio by local regression models built from a growing set
//! of true-model evaluations. Cross-validation error indicators decide when
//! the local models are too uncertain to trust, and random refinement at a
//! slowly decaying rate keeps the chain asymptotically exact.
//!
//! Module map:
//!
//! - [`sample_store`]: the evaluated-sample set and exact neighbor queries.
//! - [`local_poly`]: weighted local linear/quadratic regression.
//! - [`local_gp`]: local Gaussian-process regression.
//! - [`approx_mh`]: the surrogate-driven Metropolis-Hastings kernel.
//! - [`forward_models`]: the problem abstraction and ODE/analytic benchmarks.
//! - [`elliptic`]: the KL-parameterized elliptic PDE benchmark.
//! - [`harness`]: covariance-error and cost traces for experiments.
//! - [`experiment`]: configuration and on-disk experiment batteries.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod approx_mh;
pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod forward_models;
pub mod harness;
pub mod moments;
pub mod local_gp;
pub mod local_poly;
pub mod rng;
pub mod sample_store;

pub use error::{Error, ErrorCategory, Result};
