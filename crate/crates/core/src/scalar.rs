//! Scalar abstraction over the floating-point element type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar usable as the latent element type.
///
/// `from_real` / `to_real` convert through `f64`, which is exact for both
/// supported widths in one direction and rounds once in the other; constants
/// and accumulators go through them so formulas can be written once.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Narrow an `f64` into this type (rounds for `f32`).
    fn from_real(v: f64) -> Self;
    /// Widen to `f64` (exact).
    fn to_real(self) -> f64;
    /// One standard normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_real(v: f64) -> Self {
        v as f32
    }
    fn to_real(self) -> f64 {
        f64::from(self)
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn from_real(v: f64) -> Self {
        v
    }
    fn to_real(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_width() {
        assert_eq!(f32::from_real(1.5).to_real(), 1.5);
        assert_eq!(f64::from_real(1.5), 1.5);
    }

    #[test]
    fn normal_draws_match_distribution_width() {
        let mut rng = rng_from_seed(7);
        let a: f32 = Scalar::standard_normal(&mut rng);
        let mut rng = rng_from_seed(7);
        let b: f32 = Scalar::standard_normal(&mut rng);
        assert_eq!(a, b);
    }
}
