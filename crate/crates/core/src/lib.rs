//! High-order multistep solver for decoupled and coupled forward–backward
//! stochastic differential equations on a spatial grid.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod multistep;
pub mod problems;
pub mod quadrature;
pub mod solver;
pub mod spacegrid;

pub use error::{Error, Result};
