//! Neural unbalanced optimal transport.
//!
//! Learns a pair of input-convex potentials `f`, `g` whose gradients map
//! between two unpaired point clouds, together with positive rescaling
//! networks `eta`, `zeta` that account for mass created or destroyed along
//! the way. Batch-level reweighting targets come from an entropic
//! unbalanced Sinkhorn solver.

// `!(a > b)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod diffengine;
pub mod error;
pub mod icnn;
pub mod metrics;
pub mod oracle;
pub mod otcore;
pub mod predictor;
pub mod rescaler;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
