//! Scalar abstraction: every numerical routine in the crate is generic over a
//! floating-point type implementing [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum<Self>
        + Debug
        + Display
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + 'static
{
}

/// Convert an `f64` literal into the working scalar type.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert into the scalar type")
}

/// Convert the working scalar into `f64` (for diagnostics and error reports).
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Draw a standard normal deviate in the working scalar type.
///
/// Sampling always goes through `f64` so a given seed yields the same stream
/// of deviates regardless of the scalar the caller instantiates.
#[inline]
pub fn std_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = StandardNormal.sample(rng);
    real(x)
}

/// Tolerance for "sums to one" checks on mass vectors: 1e-10 at f64
/// precision, loosened proportionally for narrower scalars.
#[inline]
pub fn mass_tol<T: Scalar>() -> T {
    T::max(real(1e-10), T::epsilon() * real(1e3))
}

/// Clamp threshold for round-off negatives in stationary solves: 1e-12 at
/// f64 precision.
#[inline]
pub fn neg_tol<T: Scalar>() -> T {
    T::max(real(1e-12), T::epsilon() * real(100.0))
}

/// Sum with pairwise splitting to keep round-off from drifting on long
/// vectors.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    if xs.len() <= 32 {
        let mut acc = T::zero();
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_round_trips_literals() {
        assert_eq!(real::<f64>(0.25), 0.25);
        assert_eq!(real::<f32>(0.25), 0.25f32);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 7.0).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
    }
}
