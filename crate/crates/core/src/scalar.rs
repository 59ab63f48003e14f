//! Scalar abstraction shared by every numeric module.
//!
//! All geometry, rendering and fitting code is written against [`Real`], which
//! is implemented for `f32` and `f64`. Tolerance-sensitive paths (gradient
//! checks, epipolar residuals) are exercised in `f64`.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal must be representable")
    }

    /// Widens to `f64` (lossless for both implementors).
    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar must convert to f64")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}
