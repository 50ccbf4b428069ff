//! Scalar abstraction: the numeric kernels are generic over `f32`/`f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + LowerExp
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant (exact for `f64`).
    fn c(v: f64) -> Self;

    /// Conversion to `f64` for output formatting and cross-type checks.
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// ln(2π) to full double precision.
pub const LN_TWO_PI: f64 = 1.837_877_066_409_345_3;
