//! Gradient-based multilevel optimization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense float64 tensors with a reverse-mode tape that can
//!   record its own backward pass (gradients of gradients).
//! - [`problem`]: one optimization level with its parameters, cost, data
//!   stream and optimizer.
//! - [`graph`]: the two-edge-type dependency graph and path compilation.
//! - [`jacobian`]: best-response Jacobian-vector products (ITD and three AID
//!   variants).
//! - [`engine`]: scheduling and hypergradient evaluation along compiled paths.

pub mod engine;
pub mod error;
pub mod graph;
pub mod jacobian;
pub mod nn;
pub mod problem;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
