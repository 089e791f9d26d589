//! Floating-point element trait shared by the differentiable pipeline.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Element type for tape-backed computations.
///
/// Training runs in `f32`; gradient checks and reference comparisons run the
/// same code in `f64`. Conversions route through `f64` so random draws and
/// constants are produced identically for both widths.
pub trait Scalar:
    LinalgScalar + ScalarOperand + Float + Sum + AddAssign + Display + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
