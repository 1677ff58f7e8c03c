//! Scalar abstraction the numeric core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar for tensors, gradients, and balancing math.
///
/// Implemented for `f32` and `f64`. The crate-root aliases pin the shipped
/// training stack to `f64` so that magnitude ratios are not perturbed by
/// float width.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn real(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant must be representable")
    }

    /// Widens to `f64` for reporting and metric aggregation.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must widen to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
