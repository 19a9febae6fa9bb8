use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossless-as-possible conversion from an `f64` constant.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

pub(crate) fn all_finite<F: Scalar>(a: &[F]) -> bool {
    a.iter().all(|x| x.is_finite())
}
