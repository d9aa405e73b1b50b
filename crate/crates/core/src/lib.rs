//! Quantile hedging under non-linear drivers by piecewise constant policy
//! timestepping and a monotone implicit finite-difference scheme.
//!
//! The value `v(t, x, p)` is the least initial wealth that hedges the claim
//! `g(X_T)` with probability at least `p`. Each step of the backward induction
//! freezes the auxiliary control `a`, solves one degenerate semilinear PDE per
//! control on a p-grid aligned with its diffusion, and takes the minimum.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fd;
pub mod grid;
pub mod harness;
pub mod model;
pub mod reference;
pub mod solver;

pub use error::{Error, Result};
