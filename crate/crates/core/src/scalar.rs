use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumCast};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar the library is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + FromStr + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic function `1 / (1 + exp(-z))`.
pub fn logistic<T: Scalar>(z: T) -> T {
    let one = T::one();
    if z >= T::zero() {
        one / (one + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (one + ez)
    }
}

/// Exponent clamp shared by every exponential in the surrogate family.
pub const EXP_CLAMP: f64 = 30.0;

/// `exp(clamp(z, -30, 30))`.
#[inline]
pub fn clamped_exp<T: Scalar>(z: T) -> T {
    let c = T::lit(EXP_CLAMP);
    z.max(-c).min(c).exp()
}

/// Derivative of [`clamped_exp`]; zero outside the clamp window.
#[inline]
pub fn clamped_exp_deriv<T: Scalar>(z: T) -> T {
    let c = T::lit(EXP_CLAMP);
    if z > c || z < -c {
        T::zero()
    } else {
        z.exp()
    }
}

/// Sum in the given order. Kept as a named helper so every reduction in the
/// crate is visibly sequential and therefore deterministic.
pub fn ordered_sum<T: Scalar, I: IntoIterator<Item = T>>(iter: I) -> T {
    iter.into_iter().fold(T::zero(), |acc, v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_matches_direct_formula() {
        for z in [-5.0f64, -1.0, 0.0, 0.3, 2.0, 7.5] {
            let direct = 1.0 / (1.0 + (-z).exp());
            assert!((logistic(z) - direct).abs() < 1e-15);
        }
        assert_eq!(logistic(0.0f32), 0.5);
    }

    #[test]
    fn logistic_is_finite_far_out() {
        assert_eq!(logistic(-1000.0f64), 0.0);
        assert_eq!(logistic(1000.0f64), 1.0);
    }

    #[test]
    fn clamp_caps_exponent() {
        assert_eq!(clamped_exp(100.0f64), 30f64.exp());
        assert_eq!(clamped_exp(-100.0f64), (-30f64).exp());
        assert_eq!(clamped_exp_deriv(31.0f64), 0.0);
        assert_eq!(clamped_exp_deriv(1.0f64), 1f64.exp());
    }
}
