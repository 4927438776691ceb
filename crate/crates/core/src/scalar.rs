//! Floating-point abstraction used by the numeric modules.
//!
//! Model math is written once against [`Scalar`] and instantiated at `f32` or
//! `f64`. Checkpoints always store `f64`, so a round trip through disk is exact
//! for the default scalar.

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Narrowing conversion from `f64` (named to avoid clashing with
    /// `FromPrimitive::from_f64`, which returns an `Option`).
    fn from64(x: f64) -> Self;
    /// Widening conversion to `f64`.
    fn to64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to64(self) -> f64 {
        self
    }
}
