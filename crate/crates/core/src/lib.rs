//! Allocation-only core of the samsfleet simulator.
//!
//! Everything here is deterministic given its seeds and free of IO: the
//! companion `samsfleet` crate adds file formats, parallel rollouts and the
//! command line.

#![no_std]
// NaN must fail validation, so checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod a2c;
pub mod assignment;
pub mod demand;
pub mod diffnet;
pub mod domain;
pub mod error;
pub mod mdp;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
