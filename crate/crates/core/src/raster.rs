//! Conversions between 8-bit RGB rasters and planar `[-1, 1]` pixel buffers,
//! plus grid and heat-map composition for exported figures.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Planar CHW pixels in `[-1, 1]` for a square RGB image.
pub fn to_planar(img: &RgbImage) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            out[c * plane + i] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`to_planar`]; values are clamped to `[-1, 1]` and rounded.
pub fn from_planar(data: &[f64], size: u32) -> RgbImage {
    let plane = (size * size) as usize;
    assert_eq!(data.len(), 3 * plane, "planar buffer does not match {size}x{size}");
    RgbImage::from_fn(size, size, |x, y| {
        let i = (y * size + x) as usize;
        let ch = |c: usize| ((data[c * plane + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        Rgb([ch(0), ch(1), ch(2)])
    })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

pub fn upscale_nearest(img: &RgbImage, factor: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w * factor, h * factor, |x, y| *img.get_pixel(x / factor, y / factor))
}

/// Rows of equally sized tiles separated by a `gap`-pixel white border.
pub fn compose_grid(rows: &[Vec<RgbImage>], gap: u32) -> RgbImage {
    let tile = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .map(|t| t.dimensions())
        .unwrap_or((1, 1));
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0) as u32;
    let width = cols * tile.0 + (cols + 1) * gap;
    let height = rows.len() as u32 * tile.1 + (rows.len() as u32 + 1) * gap;
    let mut out = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let ox = gap + c as u32 * (tile.0 + gap);
            let oy = gap + r as u32 * (tile.1 + gap);
            for (x, y, px) in t.enumerate_pixels() {
                out.put_pixel(ox + x, oy + y, *px);
            }
        }
    }
    out
}

/// Blend a `grid × grid` weight map over `img` as a red heat overlay.
/// Weights are rescaled to their own maximum.
pub fn heat_overlay(img: &RgbImage, weights: &[f64], grid: u32) -> RgbImage {
    assert_eq!(weights.len(), (grid * grid) as usize, "weight map size");
    let (w, h) = img.dimensions();
    let peak = weights.iter().cloned().fold(0.0, f64::max).max(1e-12);
    RgbImage::from_fn(w, h, |x, y| {
        let gx = (x * grid / w).min(grid - 1);
        let gy = (y * grid / h).min(grid - 1);
        let a = (weights[(gy * grid + gx) as usize] / peak).clamp(0.0, 1.0);
        let px = img.get_pixel(x, y);
        let blend = |base: u8, top: f64| ((1.0 - 0.6 * a) * base as f64 + 0.6 * a * top).round() as u8;
        Rgb([blend(px[0], 255.0), blend(px[1], 0.0), blend(px[2], 0.0)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_round_trip_is_exact_for_u8() {
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb([(x * 60) as u8, (y * 70) as u8, ((x + y) * 30) as u8]));
        assert_eq!(from_planar(&to_planar(&img), 4), img);
    }

    #[test]
    fn grid_dimensions() {
        let t = RgbImage::new(8, 8);
        let g = compose_grid(&[vec![t.clone(), t.clone(), t.clone()], vec![t.clone(), t.clone(), t]], 2);
        assert_eq!(g.dimensions(), (3 * 8 + 4 * 2, 2 * 8 + 3 * 2));
    }
}
