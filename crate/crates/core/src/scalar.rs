use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the numerical kernels are written against: `f32` or `f64`.
///
/// Training and gradient checks run in `f64`; `f32` is supported by every
/// geometry, loss, and scoring routine for inference-side use.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count representable in scalar type")
    }

    /// `self^e` with `0^0 = 1`.
    #[inline]
    fn pow0(self, e: Self) -> Self {
        if e == Self::zero() {
            Self::one()
        } else {
            self.powf(e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Left-to-right sum; the reduction order is part of the reproducibility contract.
#[inline]
pub fn ordered_sum<T: Scalar, I: IntoIterator<Item = T>>(it: I) -> T {
    it.into_iter().fold(T::zero(), |acc, v| acc + v)
}
