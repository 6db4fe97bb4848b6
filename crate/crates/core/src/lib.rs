//! Desk-scale laboratory for dense-to-MoE conversion and routing failure modes.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convert;
pub mod error;
pub mod harness;
pub mod model;
pub mod numkernel;
pub mod precision;
pub mod routing;
pub mod telemetry;

pub use error::{Error, Result};
