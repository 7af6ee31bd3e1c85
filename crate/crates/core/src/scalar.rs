//! Floating-point abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the solvers are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Largest exponent argument accepted before `exp` is considered to overflow.
    fn exp_guard() -> Self;
}

impl Scalar for f32 {
    fn exp_guard() -> Self {
        80.0
    }
}

impl Scalar for f64 {
    fn exp_guard() -> Self {
        700.0
    }
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// `expm1(x) / x`, continuous at zero.
#[inline]
pub fn exprel<T: Scalar>(x: T) -> T {
    if x.abs() < lit(1e-5) {
        T::one() + x / lit(2.0) + x * x / lit(6.0)
    } else {
        x.exp_m1() / x
    }
}
