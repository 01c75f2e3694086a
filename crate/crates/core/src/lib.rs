//! Weak/strong mixture of experts on graphs.
//!
//! A feature-only perceptron expert and a graph-convolution expert are
//! combined per node through a confidence function of the weak expert's
//! prediction. The crate holds the differentiation engine, graph
//! generators, both experts, the mixture losses, the training loop, and a
//! brute-force laboratory that checks the optimization theory behind the
//! confidence-weighted loss.

// `!(x > 0.0)` is how the validators reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod error;
pub mod exec;
pub mod experts;
pub mod graph;
pub mod mixture;
pub mod simplex;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
