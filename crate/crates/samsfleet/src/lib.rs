//! File formats, parallel rollouts, reports and the command implementations
//! of the `samsfleet` binary, on top of `samsfleet-core`.

// NaN must fail validation, so checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod io;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
