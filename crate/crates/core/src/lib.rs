//! Prototype-based exemplar-free class-incremental learning with drift
//! compensation of stored class prototypes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod drift;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extractor;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod prototypes;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
