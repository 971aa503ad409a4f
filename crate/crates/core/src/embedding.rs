//! Joint image/text embeddings and target-embedding estimation.
//!
//! Image conditioning for the target branch is estimated without ever seeing
//! the target image: starting from the source image's embedding, add the
//! direction that separates the target prompt from the source prompt in the
//! shared space. The arithmetic lives here; producing the vectors is the job
//! of a [`JointEmbedder`] implementation.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;

/// Which side of the joint space a vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// A vector in the joint image/text embedding space. Always finite with
/// strictly positive norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<S> {
    values: Array1<S>,
    modality: Modality,
}

impl<S: Scalar> EmbeddingVector<S> {
    /// Wrap a vector, rejecting empty, non-finite, or zero-norm input.
    pub fn new(values: Array1<S>, modality: Modality) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding vector contains non-finite entries"));
        }
        if values.iter().all(|v| *v == S::zero()) {
            return Err(Error::invalid("embedding vector has zero norm"));
        }
        Ok(Self { values, modality })
    }

    /// Image-modality constructor.
    pub fn image(values: Array1<S>) -> Result<Self> {
        Self::new(values, Modality::Image)
    }

    /// Text-modality constructor.
    pub fn text(values: Array1<S>) -> Result<Self> {
        Self::new(values, Modality::Text)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &Array1<S> {
        &self.values
    }

    pub fn into_inner(self) -> Array1<S> {
        self.values
    }

    /// Euclidean norm.
    pub fn norm(&self) -> S {
        self.values.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }
}

/// Estimate the target image embedding as
/// `e_img_src + (e_txt_tgt - e_txt_src)`; the result is image-modality.
///
/// With `renormalize` set, the result is rescaled to the source image
/// embedding's norm, which keeps conditioning strength comparable when the
/// text offset is large. A zero-norm result cannot be represented and is an
/// error.
pub fn estimate_target_embedding<S: Scalar>(
    img_src: &EmbeddingVector<S>,
    txt_src: &EmbeddingVector<S>,
    txt_tgt: &EmbeddingVector<S>,
    renormalize: bool,
) -> Result<EmbeddingVector<S>> {
    if img_src.modality() != Modality::Image
        || txt_src.modality() != Modality::Text
        || txt_tgt.modality() != Modality::Text
    {
        return Err(Error::invalid(
            "target estimation needs an image embedding and two text embeddings",
        ));
    }
    let d = img_src.dim();
    if txt_src.dim() != d || txt_tgt.dim() != d {
        return Err(Error::shape(
            "target embedding estimation",
            &[d],
            &[txt_src.dim(), txt_tgt.dim()],
        ));
    }
    let mut est = img_src.values() + &(txt_tgt.values() - txt_src.values());
    if renormalize {
        let norm = est.iter().map(|v| *v * *v).sum::<S>().sqrt();
        if norm <= S::zero() {
            return Err(Error::invalid("estimated embedding has zero norm, cannot renormalize"));
        }
        let scale = img_src.norm() / norm;
        est = est * scale;
    }
    EmbeddingVector::image(est)
}

/// Cosine similarity (valid across modalities).
pub fn cosine_similarity<S: Scalar>(a: &EmbeddingVector<S>, b: &EmbeddingVector<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::shape("cosine similarity", &[a.dim()], &[b.dim()]));
    }
    let na = a.norm();
    let nb = b.norm();
    if na <= S::zero() || nb <= S::zero() {
        return Err(Error::invalid("cosine similarity of a zero-norm embedding"));
    }
    let dot: S = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| *x * *y)
        .sum();
    Ok(dot / (na * nb))
}

/// Maps images and texts into one shared embedding space.
pub trait JointEmbedder<S: Scalar> {
    /// Joint-space embedding of an image.
    fn embed_image(&self, image: &LatentGrid<S>) -> Result<EmbeddingVector<S>>;

    /// Joint-space embedding of a text.
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector<S>>;

    /// Pre-pooling per-patch features of an image, one row per patch in
    /// row-major grid order. Used for structure comparison between images.
    fn patch_features(&self, image: &LatentGrid<S>) -> Result<Array2<S>>;

    /// Dimension of the joint space.
    fn dim(&self) -> usize;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    fn img(vals: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::image(arr1(vals)).unwrap()
    }

    fn txt(vals: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::text(arr1(vals)).unwrap()
    }

    #[test]
    fn identical_prompts_leave_embedding_bitwise_unchanged() {
        let i = img(&[0.1, -0.7, 0.3]);
        let t = txt(&[5.0, 2.5, -1.25]);
        let out = estimate_target_embedding(&i, &t, &t, false).unwrap();
        assert_eq!(out.values(), i.values());
        assert_eq!(out.modality(), Modality::Image);
    }

    #[test]
    fn offset_is_the_text_difference() {
        // (1,0) + ((1,1) - (0,1)) = (2,0).
        let i = img(&[1.0, 0.0]);
        let s = txt(&[0.0, 1.0]);
        let t = txt(&[1.0, 1.0]);
        let out = estimate_target_embedding(&i, &s, &t, false).unwrap();
        assert_eq!(out.values(), &arr1(&[2.0, 0.0]));
    }

    #[test]
    fn swapping_prompt_roles_inverts_the_estimate() {
        let i = img(&[1.0, 2.0, 3.0]);
        let s = txt(&[0.5, 0.0, -0.5]);
        let t = txt(&[1.5, 1.0, -0.25]);
        let fwd = estimate_target_embedding(&i, &s, &t, false).unwrap();
        let back = estimate_target_embedding(&fwd, &t, &s, false).unwrap();
        for (a, b) in back.values().iter().zip(i.values().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn estimate_is_linear_in_scaling() {
        let i = img(&[0.4, -1.2]);
        let s = txt(&[0.3, 0.9]);
        let t = txt(&[-0.6, 0.1]);
        let alpha = 2.75;
        let base = estimate_target_embedding(&i, &s, &t, false).unwrap();
        let scaled = estimate_target_embedding(
            &img(&[0.4 * alpha, -1.2 * alpha]),
            &txt(&[0.3 * alpha, 0.9 * alpha]),
            &txt(&[-0.6 * alpha, 0.1 * alpha]),
            false,
        )
        .unwrap();
        for (a, b) in scaled.values().iter().zip(base.values().iter()) {
            assert_relative_eq!(*a, b * alpha, max_relative = 1e-12);
        }
    }

    #[test]
    fn renormalized_estimate_keeps_source_norm() {
        let i = img(&[3.0, 4.0]);
        let s = txt(&[1.0, 0.0]);
        let t = txt(&[10.0, 0.0]);
        let out = estimate_target_embedding(&i, &s, &t, true).unwrap();
        assert_relative_eq!(out.norm(), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn modality_and_dimension_mismatches_are_errors() {
        let i = img(&[1.0, 2.0]);
        let s = txt(&[1.0]);
        let t = txt(&[1.0, 2.0]);
        assert!(estimate_target_embedding(&i, &s, &t, false).is_err());
        // Image embedding in a text slot.
        assert!(estimate_target_embedding(&i, &img(&[1.0, 0.0]), &t, false).is_err());
        assert!(estimate_target_embedding(&t, &t, &t, false).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = img(&[1.0, 0.0]);
        let b = txt(&[0.0, 1.0]);
        let c = txt(&[2.0, 0.0]);
        assert_relative_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_relative_eq!(cosine_similarity(&a, &c).unwrap(), 1.0);
        assert_relative_eq!(cosine_similarity(&b, &txt(&[0.0, -3.0])).unwrap(), -1.0);
        assert_relative_eq!(
            cosine_similarity(&a, &txt(&[1.0, 1.0])).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_vectors_cannot_be_constructed() {
        assert!(EmbeddingVector::<f64>::image(arr1(&[0.0, 0.0])).is_err());
        assert!(EmbeddingVector::<f64>::text(arr1(&[])).is_err());
        assert!(EmbeddingVector::<f64>::image(arr1(&[f64::NAN])).is_err());
    }
}
