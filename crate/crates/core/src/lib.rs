//! Length-debiased learning to rank from view-time feedback.
//!
//! Videos are bucketed into length groups; preference pairs are labeled by
//! play progress and compared both across and within groups, and a two-head
//! scorer is trained with a mixed BPR objective.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod grouping;
pub mod model;
pub mod sampling;
pub mod synthgen;
pub mod training;

pub use error::{Error, ErrorKind, Result};
