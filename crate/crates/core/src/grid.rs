//! Image latents.
//!
//! The toy backend denoises directly in pixel space, so a [`LatentGrid`] is
//! simply an `H x W x C` array of scalars in (nominally) `[0, 1]` for clean
//! images, unbounded for noisy ones.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An `H x W x C` latent or image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<S> {
    data: Array3<S>,
}

impl<S: Scalar> LatentGrid<S> {
    /// Wrap an array, rejecting non-finite entries.
    pub fn new(data: Array3<S>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent grid contains non-finite entries"));
        }
        Ok(Self { data })
    }

    /// All-zero grid.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    /// Grid filled with a constant.
    pub fn filled(height: usize, width: usize, channels: usize, value: S) -> Self {
        Self {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    /// Grid of i.i.d. standard normal draws.
    pub fn standard_normal<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut data = Array3::zeros((height, width, channels));
        for v in data.iter_mut() {
            *v = S::standard_normal(rng);
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<S> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<S> {
        self.data
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless `other` has the same shape.
    pub fn check_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            let (h, w, c) = self.shape();
            let (oh, ow, oc) = other.shape();
            return Err(Error::shape(context, &[h, w, c], &[oh, ow, oc]));
        }
        Ok(())
    }

    /// Root-mean-square difference to `other`, in `f64`.
    pub fn rmse(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "rmse on mismatched shapes");
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| {
                let d = a.to_real() - b.to_real();
                d * d
            })
            .sum();
        (sum / n).sqrt()
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            data: self.data.mapv(|v| f(v)),
        }
    }

    /// Clamp every entry to `[lo, hi]`.
    pub fn clamped(&self, lo: S, hi: S) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Convert the scalar type (e.g. `f32` grid to `f64`).
    pub fn cast<T: Scalar>(&self) -> LatentGrid<T> {
        LatentGrid {
            data: self.data.mapv(|v| T::from_real(v.to_real())),
        }
    }
}

impl<S: Scalar> From<Array3<S>> for LatentGrid<S> {
    fn from(data: Array3<S>) -> Self {
        Self { data }
    }
}

/// Map a `[0, 1]` image into the zero-centered latent space `[-1, 1]`.
pub fn to_latent<S: Scalar>(img: &LatentGrid<S>) -> LatentGrid<S> {
    let two = S::from_real(2.0);
    img.map(|v| two * v - S::one())
}

/// Inverse of [`to_latent`], clamped to `[0, 1]`.
pub fn from_latent<S: Scalar>(z: &LatentGrid<S>) -> LatentGrid<S> {
    let half = S::from_real(0.5);
    z.map(|v| ((v + S::one()) * half).max(S::zero()).min(S::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn rejects_non_finite() {
        let bad = arr3(&[[[f32::NAN]]]);
        assert!(LatentGrid::new(bad).is_err());
    }

    #[test]
    fn rmse_of_identical_grids_is_zero() {
        let g = LatentGrid::<f32>::filled(4, 4, 3, 0.25);
        assert_eq!(g.rmse(&g), 0.0);
    }

    #[test]
    fn shape_accessors() {
        let g = LatentGrid::<f64>::zeros(2, 5, 3);
        assert_eq!(g.shape(), (2, 5, 3));
        assert_eq!(g.height(), 2);
        assert_eq!(g.width(), 5);
        assert_eq!(g.channels(), 3);
    }

    #[test]
    fn latent_range_round_trip() {
        let img = LatentGrid::from(arr3(&[[[0.0f64, 0.25, 1.0], [0.5, 0.75, 0.125]]]));
        let z = to_latent(&img);
        assert_eq!(z.data()[[0, 0, 0]], -1.0);
        assert_eq!(z.data()[[0, 0, 2]], 1.0);
        assert_eq!(z.data()[[0, 1, 0]], 0.0);
        let back = from_latent(&z);
        assert!(img.rmse(&back) < 1e-15);
        // Out-of-range latents clamp instead of leaving [0, 1].
        let wild = LatentGrid::<f64>::filled(1, 1, 1, 7.0);
        assert_eq!(from_latent(&wild).data()[[0, 0, 0]], 1.0);
    }
}
