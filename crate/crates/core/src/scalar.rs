//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! Everything is written against [`Real`], which is nalgebra's `RealField`
//! plus `Copy` and thread-safety. `f64` is the working precision; `f32` is
//! supported for memory-bound use but the tolerances quoted in the docs
//! assume `f64`.

use nalgebra::RealField;

pub trait Real: RealField + Copy + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_subset(&x)
}

/// Converts a working scalar back to `f64`.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    // Both supported scalars embed into f64 without loss of the value.
    x.to_subset().unwrap_or(f64::NAN)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > lit(30.0) {
        x + (-x).exp()
    } else if x < lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
