//! Evaluation metrics for edits.
//!
//! Background fidelity (MSE / PSNR / masked SSIM over the unedited region),
//! structural similarity via patch-feature self-similarity, prompt alignment
//! through the joint embedder, and mask IoU for grounding quality. All
//! statistics are computed in `f64` regardless of the image scalar type.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, JointEmbedder};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::grounding::EditMask;
use crate::scalar::Scalar;

/// PSNR is capped here (identical images would otherwise be infinite).
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window: 11x11 Gaussian, sigma 1.5, standard stabilizers.
const SSIM_RADIUS: i64 = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair<S: Scalar>(a: &LatentGrid<S>, b: &LatentGrid<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "image pair",
            &[a.height(), a.width(), a.channels()],
            &[b.height(), b.width(), b.channels()],
        ));
    }
    Ok(())
}

fn check_mask<S: Scalar>(image: &LatentGrid<S>, mask: &Array2<bool>) -> Result<()> {
    if mask.dim() != (image.height(), image.width()) {
        return Err(Error::shape(
            "edit mask",
            &[image.height(), image.width()],
            &[mask.nrows(), mask.ncols()],
        ));
    }
    Ok(())
}

/// Mean squared error over pixels *outside* the edited region, all channels.
/// Errors if the mask covers the whole image (no background remains).
pub fn background_mse<S: Scalar>(
    a: &LatentGrid<S>,
    b: &LatentGrid<S>,
    edited: &Array2<bool>,
) -> Result<f64> {
    check_pair(a, b)?;
    check_mask(a, edited)?;
    let mut sum = 0.0;
    let mut count = 0.0;
    for h in 0..a.height() {
        for w in 0..a.width() {
            if edited[[h, w]] {
                continue;
            }
            for c in 0..a.channels() {
                let d = a.data()[[h, w, c]].to_real() - b.data()[[h, w, c]].to_real();
                sum += d * d;
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::invalid("edit mask covers the entire image; no background left"));
    }
    Ok(sum / count)
}

/// PSNR in decibels for signals in `[0, 1]`, from a mean squared error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR over the unedited region.
pub fn background_psnr<S: Scalar>(
    a: &LatentGrid<S>,
    b: &LatentGrid<S>,
    edited: &Array2<bool>,
) -> Result<f64> {
    Ok(psnr_from_mse(background_mse(a, b, edited)?))
}

/// Mean SSIM over background pixels, channels averaged.
///
/// Each 11x11 Gaussian window is renormalized over the pixels that are both
/// in bounds and outside the edited region, so edited content never leaks
/// into background statistics. Errors if the mask covers the whole image.
pub fn background_ssim<S: Scalar>(
    a: &LatentGrid<S>,
    b: &LatentGrid<S>,
    edited: &Array2<bool>,
) -> Result<f64> {
    check_pair(a, b)?;
    check_mask(a, edited)?;
    let (height, width, channels) = a.shape();
    if edited.iter().all(|v| *v) {
        return Err(Error::invalid("edit mask covers the entire image; no background left"));
    }

    let mut kernel = [[0.0f64; 11]; 11];
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, k) in row.iter_mut().enumerate() {
            let y = dy as f64 - SSIM_RADIUS as f64;
            let x = dx as f64 - SSIM_RADIUS as f64;
            *k = (-(y * y + x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }

    let mut total = 0.0;
    let mut windows = 0.0;
    for h in 0..height {
        for w in 0..width {
            if edited[[h, w]] {
                continue;
            }
            for c in 0..channels {
                // Weighted window statistics over valid background pixels.
                let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in -SSIM_RADIUS..=SSIM_RADIUS {
                    for dx in -SSIM_RADIUS..=SSIM_RADIUS {
                        let y = h as i64 + dy;
                        let x = w as i64 + dx;
                        if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
                            continue;
                        }
                        let (y, x) = (y as usize, x as usize);
                        if edited[[y, x]] {
                            continue;
                        }
                        let k = kernel[(dy + SSIM_RADIUS) as usize][(dx + SSIM_RADIUS) as usize];
                        let pa = a.data()[[y, x, c]].to_real();
                        let pb = b.data()[[y, x, c]].to_real();
                        wsum += k;
                        ma += k * pa;
                        mb += k * pb;
                        va += k * pa * pa;
                        vb += k * pb * pb;
                        cov += k * pa * pb;
                    }
                }
                // The centre pixel is background, so wsum > 0 always.
                ma /= wsum;
                mb /= wsum;
                va = va / wsum - ma * ma;
                vb = vb / wsum - mb * mb;
                cov = cov / wsum - ma * mb;
                let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += ssim;
                windows += 1.0;
            }
        }
    }
    Ok(total / windows)
}

/// Structural distance between two images: mean squared difference of their
/// patch-feature cosine self-similarity matrices. Identical images score 0;
/// images whose patches relate differently to each other score higher, even
/// when appearance (e.g. color) changes uniformly.
pub fn structure_distance<S: Scalar, E: JointEmbedder<S>>(
    embedder: &E,
    a: &LatentGrid<S>,
    b: &LatentGrid<S>,
) -> Result<f64> {
    check_pair(a, b)?;
    let ga = cosine_gram(&embedder.patch_features(a)?);
    let gb = cosine_gram(&embedder.patch_features(b)?);
    let n = ga.len() as f64;
    Ok(ga
        .iter()
        .zip(gb.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

fn cosine_gram<S: Scalar>(features: &Array2<S>) -> Array2<f64> {
    let n = features.nrows();
    let norms: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .map(|v| v.to_real() * v.to_real())
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();
    let mut gram = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j).iter())
                .map(|(x, y)| x.to_real() * y.to_real())
                .sum();
            gram[[i, j]] = dot / (norms[i] * norms[j]);
        }
    }
    gram
}

/// Cosine similarity between the image embedding and the text embedding.
pub fn text_alignment<S: Scalar, E: JointEmbedder<S>>(
    embedder: &E,
    image: &LatentGrid<S>,
    text: &str,
) -> Result<f64> {
    let ei = embedder.embed_image(image)?;
    let et = embedder.embed_text(text)?;
    Ok(cosine_similarity(&ei, &et)?.to_real())
}

/// Alignment of just the edited region: everything outside the mask is
/// blacked out before embedding, so the score reflects the region's content.
pub fn edited_region_alignment<S: Scalar, E: JointEmbedder<S>>(
    embedder: &E,
    image: &LatentGrid<S>,
    text: &str,
    edited: &Array2<bool>,
) -> Result<f64> {
    check_mask(image, edited)?;
    if !edited.iter().any(|v| *v) {
        return Err(Error::invalid("empty edit mask; nothing to score"));
    }
    let mut masked = image.data().clone();
    for h in 0..image.height() {
        for w in 0..image.width() {
            if !edited[[h, w]] {
                for c in 0..image.channels() {
                    masked[[h, w, c]] = S::zero();
                }
            }
        }
    }
    text_alignment(embedder, &LatentGrid::new(masked)?, text)
}

/// Intersection-over-union of two binary masks. Two empty masks agree
/// perfectly and score 1.
pub fn mask_iou(predicted: &Array2<bool>, truth: &Array2<bool>) -> Result<f64> {
    if predicted.dim() != truth.dim() {
        return Err(Error::shape(
            "mask pair",
            &[truth.nrows(), truth.ncols()],
            &[predicted.nrows(), predicted.ncols()],
        ));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (p, t) in predicted.iter().zip(truth.iter()) {
        if *p && *t {
            inter += 1.0;
        }
        if *p || *t {
            union += 1.0;
        }
    }
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(inter / union)
}

/// IoU between a grounded edit mask and the ground truth, compared on their
/// loose (blend) halves.
pub fn grounding_iou(predicted: &EditMask, truth: &EditMask) -> Result<f64> {
    mask_iou(&predicted.blend, &truth.blend)
}

/// Bundled background fidelity over the region outside the mask's loose
/// half: `(psnr, mse, ssim)`.
pub fn background_metrics<S: Scalar>(
    a: &LatentGrid<S>,
    b: &LatentGrid<S>,
    mask: &EditMask,
) -> Result<(f64, f64, f64)> {
    let mse = background_mse(a, b, &mask.blend)?;
    let ssim = background_ssim(a, b, &mask.blend)?;
    Ok((psnr_from_mse(mse), mse, ssim))
}

/// Bundled prompt alignment: `(whole image, edited region)`, the edited
/// region taken from the mask's loose half.
pub fn alignment_scores<S: Scalar, E: JointEmbedder<S>>(
    embedder: &E,
    image: &LatentGrid<S>,
    text: &str,
    mask: &EditMask,
) -> Result<(f64, f64)> {
    let whole = text_alignment(embedder, image, text)?;
    let edited = edited_region_alignment(embedder, image, text, &mask.blend)?;
    Ok((whole, edited))
}

/// Metric schema version stamped into serialized reports.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics for one edited item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: usize,
    pub background_mse: f64,
    pub background_psnr: f64,
    pub background_ssim: f64,
    pub structure_distance: f64,
    pub whole_alignment: f64,
    pub edited_alignment: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding_iou: Option<f64>,
}

/// Aggregate statistics (one value per metric) over a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub background_mse: f64,
    pub background_psnr: f64,
    pub background_ssim: f64,
    pub structure_distance: f64,
    pub whole_alignment: f64,
    pub edited_alignment: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding_iou: Option<f64>,
}

/// A full evaluation report: per-item rows plus mean and population
/// standard deviation per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub items: Vec<ItemMetrics>,
    pub mean: SummaryMetrics,
    pub stddev: SummaryMetrics,
}

impl EvalReport {
    /// Build a report, computing the aggregates.
    pub fn from_items(items: Vec<ItemMetrics>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("cannot summarize an empty report"));
        }
        let aggregate = |f: &dyn Fn(&ItemMetrics) -> Option<f64>| -> Option<(f64, f64)> {
            let values: Vec<f64> = items.iter().filter_map(|i| f(i)).collect();
            if values.is_empty() {
                return None;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Some((mean, var.sqrt()))
        };
        let pick = |f: &dyn Fn(&ItemMetrics) -> f64| -> (f64, f64) {
            let g = |i: &ItemMetrics| Some(f(i));
            aggregate(&g).expect("items nonempty")
        };
        let (mse_m, mse_s) = pick(&|i| i.background_mse);
        let (psnr_m, psnr_s) = pick(&|i| i.background_psnr);
        let (ssim_m, ssim_s) = pick(&|i| i.background_ssim);
        let (sd_m, sd_s) = pick(&|i| i.structure_distance);
        let (wa_m, wa_s) = pick(&|i| i.whole_alignment);
        let (ea_m, ea_s) = pick(&|i| i.edited_alignment);
        let iou = aggregate(&|i| i.grounding_iou);
        let mean = SummaryMetrics {
            background_mse: mse_m,
            background_psnr: psnr_m,
            background_ssim: ssim_m,
            structure_distance: sd_m,
            whole_alignment: wa_m,
            edited_alignment: ea_m,
            grounding_iou: iou.map(|(m, _)| m),
        };
        let stddev = SummaryMetrics {
            background_mse: mse_s,
            background_psnr: psnr_s,
            background_ssim: ssim_s,
            structure_distance: sd_s,
            whole_alignment: wa_s,
            edited_alignment: ea_s,
            grounding_iou: iou.map(|(_, s)| s),
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            items,
            mean,
            stddev,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("serializing report: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let report: Self = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("parsing report {}: {e}", path.display())))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "report schema version {} unsupported (expected {})",
                report.schema_version, REPORT_SCHEMA_VERSION
            )));
        }
        Ok(report)
    }
}
