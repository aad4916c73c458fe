use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar used throughout the crate: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    lo.max(hi.min(v))
}

/// Slack for fractional grid coordinates up to `span` cells: 1e-9 in `f64`,
/// widened to a few ulps where the type is coarser.
pub(crate) fn index_slack<T: Scalar>(span: T) -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(64.0) * span.max(T::one()))
}
