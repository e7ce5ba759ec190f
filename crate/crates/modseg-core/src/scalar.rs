//! Floating-point abstraction for the numeric core.
//!
//! Everything downstream (divergences, losses, network layers, the training
//! engine) is generic over [`Scalar`] so the same code can run in `f32` for
//! training throughput and in `f64` for finite-difference gradient checks.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the numeric core is generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
    + 'static
{
    /// Lossy cast from `f64`, for constants written in source.
    fn c(v: f64) -> Self;

    /// Widen to `f64` for tolerance checks and reporting.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Sum-to-one tolerance used when validating probability vectors.
///
/// `1e-9` is meaningful for `f64`; for `f32` the accumulation error of a
/// handful of entries already exceeds it, so the tolerance floors at a small
/// multiple of the machine epsilon.
pub fn sum_tolerance<T: Scalar>(nominal: f64) -> f64 {
    nominal.max(T::epsilon().as_f64() * 64.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn casts_round_trip() {
        assert_eq!(f32::c(0.5).as_f64(), 0.5);
        assert_eq!(f64::c(0.5), 0.5);
    }

    #[test]
    fn tolerance_scales_with_precision() {
        assert_eq!(sum_tolerance::<f64>(1e-9), 1e-9);
        assert!(sum_tolerance::<f32>(1e-9) > 1e-6);
    }
}
