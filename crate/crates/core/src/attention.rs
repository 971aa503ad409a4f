//! Attention primitives, capture records, and the injection policy.
//!
//! During an edit the source branch's attention maps are recorded and forced
//! into the target branch for the early portion of sampling, which keeps the
//! edited image structurally aligned with the source. A map is an explicit
//! row-stochastic matrix (queries by keys), cheap to store at toy sizes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which attention family a captured map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Spatial tokens attending to spatial tokens.
    SelfAttention,
    /// Spatial tokens attending to prompt tokens.
    TextCross,
}

/// One captured attention map.
///
/// `weights` has one row per query token and one column per key token; rows
/// sum to one. `block_id` identifies the network site so maps from different
/// resolutions are never confused.
#[derive(Debug, Clone)]
pub struct AttentionRecord<S> {
    pub kind: AttentionKind,
    pub block_id: usize,
    pub weights: Array2<S>,
}

/// All maps captured during one denoiser pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionBundle<S> {
    records: Vec<AttentionRecord<S>>,
}

impl<S: Scalar> AttentionBundle<S> {
    pub fn new() -> Self {
        Self { records: Vec::new() }
    }

    pub fn push(&mut self, record: AttentionRecord<S>) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[AttentionRecord<S>] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First record matching `(kind, block_id)`.
    pub fn find(&self, kind: AttentionKind, block_id: usize) -> Option<&AttentionRecord<S>> {
        self.records
            .iter()
            .find(|r| r.kind == kind && r.block_id == block_id)
    }

    /// All records of one kind, in capture order.
    pub fn of_kind(&self, kind: AttentionKind) -> Vec<&AttentionRecord<S>> {
        self.records.iter().filter(|r| r.kind == kind).collect()
    }

    /// Copy containing only records that pass the predicate.
    pub fn filtered(&self, keep: impl Fn(&AttentionRecord<S>) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d)) V`.
///
/// Returns `(output, weights)`; the weights matrix is what capture records
/// store. Softmax is computed with the row-max subtracted, so large logits
/// cannot overflow.
pub fn softmax_attention<S: Scalar>(
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
) -> Result<(Array2<S>, Array2<S>)> {
    let d = q.ncols();
    if k.ncols() != d {
        return Err(Error::shape("attention key width", &[q.nrows(), d], &[k.nrows(), k.ncols()]));
    }
    if v.nrows() != k.nrows() {
        return Err(Error::shape(
            "attention value rows",
            &[k.nrows(), v.ncols()],
            &[v.nrows(), v.ncols()],
        ));
    }
    if d == 0 {
        return Err(Error::invalid("attention with zero-width queries"));
    }
    let scale = S::one() / S::from_real(d as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    let weights = softmax_rows(&logits);
    let out = weights.dot(v);
    Ok((out, weights))
}

/// Row-wise softmax with the max subtracted per row.
pub fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Apply stored weights to fresh values: the forced-attention output.
pub fn attention_output<S: Scalar>(weights: &Array2<S>, v: &Array2<S>) -> Result<Array2<S>> {
    if weights.ncols() != v.nrows() {
        return Err(Error::shape(
            "forced attention values",
            &[weights.ncols(), v.ncols()],
            &[v.nrows(), v.ncols()],
        ));
    }
    Ok(weights.dot(v))
}

/// Whether source maps should be forced at `step_index` (0-based, counting
/// from the start of sampling) out of `total_steps`, given a cutoff fraction.
///
/// Injection covers `floor(cutoff * total_steps)` steps: `1.0` forces every
/// step, `0.0` none.
pub fn inject_policy(step_index: usize, total_steps: usize, cutoff: f64) -> bool {
    let cutoff = cutoff.clamp(0.0, 1.0);
    let forced = (cutoff * total_steps as f64).floor() as usize;
    step_index < forced
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn attention_hand_example() {
        // Q = [1, 0], K = {[1, 0], [0, 0]}, d = 2: logits are (1/sqrt(2), 0),
        // so w0 = exp(a) / (exp(a) + 1) with a = 0.7071... = 0.6697615493266569.
        let q = arr2(&[[1.0f64, 0.0]]);
        let k = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let v = arr2(&[[2.0, 0.0], [0.0, 4.0]]);
        let (out, w) = softmax_attention(&q, &k, &v).unwrap();
        assert_relative_eq!(w[[0, 0]], 0.6697615493266569, max_relative = 1e-14);
        assert_relative_eq!(w[[0, 1]], 0.3302384506733431, max_relative = 1e-14);
        assert_relative_eq!(out[[0, 0]], 1.3395230986533138, max_relative = 1e-14);
        assert_relative_eq!(out[[0, 1]], 1.3209538026933725, max_relative = 1e-14);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = arr2(&[[3.0f64, -1.0]]);
        let k = arr2(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]);
        let v = arr2(&[[1.0], [2.0], [3.0]]);
        let (out, w) = softmax_attention(&q, &k, &v).unwrap();
        for j in 0..3 {
            assert_relative_eq!(w[[0, j]], 1.0 / 3.0, max_relative = 1e-14);
        }
        assert_relative_eq!(out[[0, 0]], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn forced_output_matches_recomputed_when_weights_reused() {
        let q = arr2(&[[0.2f64, 0.8], [1.0, -0.5]]);
        let k = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let v = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let (out, w) = softmax_attention(&q, &k, &v).unwrap();
        let forced = attention_output(&w, &v).unwrap();
        assert_eq!(out, forced);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let q = arr2(&[[500.0f32, 0.0]]);
        let k = arr2(&[[500.0, 0.0], [-500.0, 0.0]]);
        let v = arr2(&[[1.0], [0.0]]);
        let (out, w) = softmax_attention(&q, &k, &v).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert_relative_eq!(out[[0, 0]], 1.0, max_relative = 1e-6);
    }

    #[test]
    fn policy_boundaries() {
        // cutoff 0.4 of 50 steps forces exactly the first 20.
        assert!(inject_policy(0, 50, 0.4));
        assert!(inject_policy(19, 50, 0.4));
        assert!(!inject_policy(20, 50, 0.4));
        for i in 0..50 {
            assert!(inject_policy(i, 50, 1.0));
            assert!(!inject_policy(i, 50, 0.0));
        }
    }

    #[test]
    fn bundle_lookup() {
        let mut b = AttentionBundle::<f32>::new();
        b.push(AttentionRecord {
            kind: AttentionKind::SelfAttention,
            block_id: 2,
            weights: Array2::zeros((4, 4)),
        });
        b.push(AttentionRecord {
            kind: AttentionKind::TextCross,
            block_id: 1,
            weights: Array2::zeros((4, 3)),
        });
        assert!(b.find(AttentionKind::SelfAttention, 2).is_some());
        assert!(b.find(AttentionKind::SelfAttention, 1).is_none());
        assert_eq!(b.of_kind(AttentionKind::TextCross).len(), 1);
        let only_self = b.filtered(|r| r.kind == AttentionKind::SelfAttention);
        assert_eq!(only_self.records().len(), 1);
    }

    proptest! {
        #[test]
        fn weights_are_row_stochastic(
            qv in proptest::collection::vec(-5.0f64..5.0, 6),
            kv in proptest::collection::vec(-5.0f64..5.0, 9),
        ) {
            let q = Array2::from_shape_vec((2, 3), qv).unwrap();
            let k = Array2::from_shape_vec((3, 3), kv).unwrap();
            let v = Array2::ones((3, 2));
            let (_, w) = softmax_attention(&q, &k, &v).unwrap();
            prop_assert_eq!(w.dim(), (2, 3));
            for row in w.rows() {
                let sum: f64 = row.sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|x| *x >= 0.0));
            }
        }
    }
}
