//! Token-adaptive min-max preference optimization on a toy multimodal policy.
//!
//! The crate bundles a small reverse-mode autodiff engine, a frozen
//! cross-modal scorer, the visual-agnostic token perturbation step, pairwise
//! and spectral preference losses, a synthetic benchmark with planted
//! spurious correlations, a trainer and an evaluation harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod numcore;
pub mod objective;
pub mod perturb;
pub mod policy;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
