//! Minimal dense-tensor reverse-mode autodiff with higher-order support.
//!
//! Values live in a per-run arena ([`Graph`]); every operation appends a node
//! holding its eagerly computed [`Tensor`] value plus a record of the
//! producing primitive and parent handles. `backward` expresses each
//! vector-Jacobian product with ordinary graph primitives, so gradients are
//! themselves differentiable nodes and gradient-of-gradient (needed to push
//! a meta objective through a virtual optimizer step, and to train on input
//! gradients) falls out of the same machinery.
//!
//! Design constraints honored here:
//! - broadcasting is restricted to scalar-with-tensor; all other shapes must
//!   match exactly,
//! - every stored value is finite — NaN/Inf is rejected at op boundaries,
//! - a node's value never mutates after creation,
//! - graph construction is deterministic: identical input values and op
//!   sequences produce bit-identical values.

mod gradcheck;
mod graph;
pub(crate) mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_grad, primitive_gradient_sweep, second_order_sweep,
};
pub use graph::{Graph, NodeId, PrimitiveKind};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by tensor and graph operations.
#[derive(Debug, Error)]
pub enum AdError {
    /// Input shapes do not conform to the operation's signature.
    #[error("shape conformance: {0}")]
    Conformance(String),
    /// An input value lies outside the operation's domain (e.g. log of a
    /// non-positive value).
    #[error("domain: {0}")]
    Domain(String),
    /// A non-finite value was produced or supplied.
    #[error("numeric: {0}")]
    Numeric(String),
    /// An API contract was violated (e.g. non-scalar backward root).
    #[error("contract: {0}")]
    Contract(String),
}

pub type AdResult<T> = Result<T, AdError>;
