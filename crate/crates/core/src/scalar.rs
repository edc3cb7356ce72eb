//! Scalar abstraction used by the numerical kernels.
//!
//! Filtering math is written against [`Real`], which is any `nalgebra`
//! real field (`f32`, `f64`). The exact polynomial algebra behind the
//! Wright–Fisher generator runs on [`num_rational::BigRational`] instead.

use nalgebra::RealField;

pub trait Real: RealField + Copy {}

impl<T: RealField + Copy> Real for T {}

/// Lift an `f64` literal into the scalar type.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lower a scalar to `f64` (lossless for `f32`/`f64`).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    nalgebra::try_convert::<T, f64>(x).unwrap_or(f64::NAN)
}

#[inline]
pub fn neg_inf<T: Real>() -> T {
    lit(f64::NEG_INFINITY)
}

#[inline]
pub fn is_finite<T: Real>(x: T) -> bool {
    to_f64(x).is_finite()
}
