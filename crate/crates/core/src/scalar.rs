//! Floating-point abstraction used by the scalar numerics.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

/// Real floating-point type the scalar kernels are written against.
///
/// Implemented for `f32` and `f64`. Dense linear algebra and the spectral
/// pipeline are written for `f64` only.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + NumCast + Debug + Display + Sum + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn to_f64_lossless(self) -> f64;

    /// Complementary error function.
    fn erfc_raw(self) -> Self;

    /// Natural log of the gamma function (for positive arguments).
    fn lgamma_raw(self) -> Self;

    /// Relative machine precision.
    fn eps() -> Self {
        Self::epsilon()
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    fn erfc_raw(self) -> Self {
        libm::erfc(self)
    }
    fn lgamma_raw(self) -> Self {
        libm::lgamma(self)
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    fn erfc_raw(self) -> Self {
        libm::erfcf(self)
    }
    fn lgamma_raw(self) -> Self {
        libm::lgammaf(self)
    }
}
