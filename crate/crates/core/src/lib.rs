//! Dataset distillation by trajectory matching, with a convexified-trajectory
//! variant, on a small self-contained autodiff engine.
//!
//! Pipeline: [`expert`] trains networks on real data and records checkpoints,
//! [`trajectory`] turns those into convex trajectories, [`distill`] learns a
//! tiny synthetic set by matching either form, and [`eval`] retrains fresh
//! networks on the result. [`store`] holds the binary file formats.

// NaN must fail the validity checks, and Var arithmetic is fallible.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod cli;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod expert;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod store;
pub mod trajectory;

pub use error::{Error, Result};
