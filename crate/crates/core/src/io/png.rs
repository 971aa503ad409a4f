//! PNG import/export for images, masks, and heatmaps.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::scalar::Scalar;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `[0, 1]` RGB grid as an 8-bit PNG.
pub fn save_image<S: Scalar>(path: &Path, img: &LatentGrid<S>) -> Result<()> {
    let (h, w, c) = img.shape();
    if c != 3 {
        return Err(Error::invalid(format!("PNG export needs 3 channels, got {c}")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for col in 0..w {
            let px = image::Rgb([
                to_u8(img.data()[[r, col, 0]].to_real()),
                to_u8(img.data()[[r, col, 1]].to_real()),
                to_u8(img.data()[[r, col, 2]].to_real()),
            ]);
            out.put_pixel(col as u32, r as u32, px);
        }
    }
    out.save(path)
        .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}

/// Load an 8-bit RGB PNG into a `[0, 1]` grid.
pub fn load_image<S: Scalar>(path: &Path) -> Result<LatentGrid<S>> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("reading {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        S::from_real(img.get_pixel(c as u32, r as u32).0[ch] as f64 / 255.0)
    });
    Ok(LatentGrid::from(data))
}

/// Save a binary mask as a black/white PNG.
pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(c as u32, r as u32, image::Luma([if mask[[r, c]] { 255 } else { 0 }]));
        }
    }
    out.save(path)
        .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}

/// Load a black/white PNG as a binary mask (threshold at 128).
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("reading {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] >= 128
    }))
}

/// Save a `[0, 1]` scalar field as a grayscale PNG.
pub fn save_heatmap<S: Scalar>(path: &Path, field: &Array2<S>) -> Result<()> {
    let (h, w) = field.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(c as u32, r as u32, image::Luma([to_u8(field[[r, c]].to_real())]));
        }
    }
    out.save(path)
        .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}
