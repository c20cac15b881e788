//! Lattice discretization and interior-point solution of variational
//! problems over convex functions, with a piecewise-affine reconstruction of
//! the approximate minimizer.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod constraints;
pub mod error;
pub mod lattice;
pub mod problem;
pub mod pwa;
pub mod risk;
pub mod solver;

pub use error::{Error, Result};
