//! Arithmetic-weighted first-order meta-learning for domain generalization.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: small multilayer perceptrons over flat parameter vectors, with an
//!   analytic backward pass and a finite-difference oracle.
//! - [`domains`]: synthetic multi-domain datasets (rotated two-moons, shifted
//!   regression), seeded batch sampling and CSV persistence.
//! - [`optim`]: momentum-free SGD, Adam, and a per-domain decomposition of
//!   Adam's first moment.
//! - [`metalearn`]: the inner/outer training engine, weighting schemes, the
//!   averaging-form update, ERM baseline, tail averaging and the Taylor /
//!   ensemble oracles.
//! - [`quadratic`]: closed-form testbed with affine optimal sets and exact
//!   projections.
//! - [`analysis`]: loss planes, momentum traces, sweeps, ablations and the
//!   bench table.
//! - [`verify`]: self-check suites used by the `verify` subcommand.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod domains;
mod error;
pub mod export;
pub mod metalearn;
pub mod nn;
pub mod optim;
pub mod quadratic;
mod vector;
pub mod verify;

pub use error::{Error, Result};
pub use vector::{GradVector, ParamVector};
