//! Scalar abstraction for the numeric core.
//!
//! The engine and the two network modules are generic over any IEEE float
//! satisfying [`Scalar`]; the pipeline pins `f64` through the crate-root
//! aliases because the second-order finite-difference checks that gate the
//! trainer are unreliable in 32-bit precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tensor engine (`f32` or `f64`).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the scalar type.
///
/// Infallible for the two provided instantiations.
#[inline]
pub fn lit<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("f64 literal representable in scalar type")
}

/// Widens a scalar back to `f64` (exact for both instantiations).
#[inline]
pub fn upcast<F: Scalar>(v: F) -> f64 {
    num_traits::ToPrimitive::to_f64(&v).expect("scalar representable as f64")
}
