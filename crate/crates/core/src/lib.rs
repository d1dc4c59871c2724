//! Attention as data-dependent image filtering.
//!
//! The crate treats self-attention as a kernel-weighted least-squares
//! smoother over (position, token) pairs, and provides the pieces needed to
//! check that view numerically: a small reverse-mode tensor library, the
//! attention kernels and their classical filter counterparts, residual
//! schemes with SNR bookkeeping, a tiny trainable stack, and a collection of
//! seeded Monte Carlo checks.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod config;
pub mod error;
pub mod filters;
pub mod lab;
pub mod linalg;
pub mod model;
pub mod report;
pub mod residual;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
