//! Covariance-aware federated feature learning under noisy labels.
//!
//! The crate is organized bottom-up:
//!
//! - [`symlin`]: symmetric/SPD linear algebra.
//! - [`encoder`]: the feed-forward feature encoder, backprop and SGD.
//! - [`objective`]: the lossy mutual-information loss and its gradient.
//! - [`covstats`]: Gaussian class statistics and their federated combination.
//! - [`classifier`]: MAP / subspace scoring and label correction.
//! - [`fleet`]: synthetic data, non-i.i.d. partitioning, label noise.
//! - [`orchestrator`]: the federated round loop and metrics.
//! - [`config`], [`cli`], [`verify`]: configuration, command line, self-checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod config;
pub mod covstats;
pub mod encoder;
pub mod error;
pub mod fleet;
pub mod objective;
pub mod orchestrator;
pub mod symlin;
pub mod verify;

pub use error::{Error, Result};
