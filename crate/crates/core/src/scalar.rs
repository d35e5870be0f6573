//! Scalar abstraction for the geometric types.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point scalar usable by the geometry types: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static
{
    /// Tolerance on `RᵀR = I` and `det R = 1` for rotations stored in this type.
    fn ortho_tolerance() -> Self;

    /// Converts an `f64` literal. Panics only if the target cannot represent
    /// finite values, which never happens for `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    #[inline]
    fn ortho_tolerance() -> Self {
        1e-5
    }
}

impl Real for f64 {
    #[inline]
    fn ortho_tolerance() -> Self {
        1e-9
    }
}
