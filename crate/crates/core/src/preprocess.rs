//! Resize-and-pad preprocessing onto the fixed square network canvas.

use thiserror::Error;

use crate::geometry::{resize_bilinear, GeometryError, SoftMask};

/// Default network canvas side.
pub const INPUT_SIZE: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("image has a zero dimension ({0}x{1})")]
    EmptyImage(usize, usize),
    #[error("canvas size must be >= 1")]
    EmptyCanvas,
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Self {
        assert_eq!(gray.len(), width * height);
        RgbImage {
            width,
            height,
            data: gray.iter().flat_map(|&g| [g, g, g]).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Canvas plus the metadata needed to map coordinates back.
///
/// Content sits at the top-left; the bottom/right pad is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessResult {
    /// Planar `3 x size x size` canvas, values in `[0, 255]`.
    pub canvas: Vec<f32>,
    pub size: usize,
    pub scale: f64,
    pub content_width: usize,
    pub content_height: usize,
    pub original_width: usize,
    pub original_height: usize,
}

impl PreprocessResult {
    /// Maps a point on the canvas back to original image coordinates.
    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale, y / self.scale)
    }

    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale, y * self.scale)
    }

    /// Crops the content area out of a canvas-sized mask and resizes it back
    /// to the original image dimensions.
    pub fn unpad_unscale(&self, canvas_mask: &SoftMask) -> Result<SoftMask, GeometryError> {
        assert_eq!((canvas_mask.height(), canvas_mask.width()), (self.size, self.size));
        let mut content = Vec::with_capacity(self.content_width * self.content_height);
        for y in 0..self.content_height {
            let row = &canvas_mask.values()[y * self.size..y * self.size + self.content_width];
            content.extend_from_slice(row);
        }
        let content = SoftMask::from_values(self.content_height, self.content_width, content)?;
        resize_bilinear(&content, self.original_height, self.original_width)
    }
}

/// Uniform scale bringing `width` (and, if still needed, `height`) within
/// `size`. Never upscales.
pub fn fit_scale(width: usize, height: usize, size: usize) -> f64 {
    let mut scale = 1.0;
    if width > size {
        scale = size as f64 / width as f64;
    }
    if (height as f64 * scale).round() > size as f64 {
        scale = size as f64 / height as f64;
    }
    scale
}

pub fn preprocess_image(image: &RgbImage, size: usize) -> Result<PreprocessResult, PreprocessError> {
    if image.width == 0 || image.height == 0 {
        return Err(PreprocessError::EmptyImage(image.width, image.height));
    }
    if size == 0 {
        return Err(PreprocessError::EmptyCanvas);
    }
    let scale = fit_scale(image.width, image.height, size);
    let cw = ((image.width as f64 * scale).round() as usize).clamp(1, size);
    let ch = ((image.height as f64 * scale).round() as usize).clamp(1, size);
    let mut canvas = vec![0.0f32; 3 * size * size];
    let sx = image.width as f64 / cw as f64;
    let sy = image.height as f64 / ch as f64;
    let coord = |dst: usize, s: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * s - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64).min(1.0) as f32)
    };
    let cols: Vec<_> = (0..cw).map(|x| coord(x, sx, image.width)).collect();
    for y in 0..ch {
        let (y0, y1, ty) = coord(y, sy, image.height);
        for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
            let p00 = image.pixel(x0, y0);
            let p01 = image.pixel(x1, y0);
            let p10 = image.pixel(x0, y1);
            let p11 = image.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - tx) + p01[c] as f32 * tx;
                let bottom = p10[c] as f32 * (1.0 - tx) + p11[c] as f32 * tx;
                canvas[(c * size + y) * size + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Ok(PreprocessResult {
        canvas,
        size,
        scale,
        content_width: cw,
        content_height: ch,
        original_width: image.width,
        original_height: image.height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pad_is_zero(r: &PreprocessResult) -> bool {
        (0..3).all(|c| {
            (0..r.size).all(|y| {
                (0..r.size).all(|x| {
                    x < r.content_width && y < r.content_height || r.canvas[(c * r.size + y) * r.size + x] == 0.0
                })
            })
        })
    }

    #[test]
    fn wide_image_is_halved() {
        let img = RgbImage::from_gray(2048, 512, &vec![200; 2048 * 512]);
        let r = preprocess_image(&img, 1024).unwrap();
        assert_eq!(r.scale, 0.5);
        assert_eq!((r.content_width, r.content_height), (1024, 256));
        assert_eq!(r.canvas.len(), 3 * 1024 * 1024);
        assert!(pad_is_zero(&r));
        assert_eq!(r.canvas[0], 200.0);
    }

    #[test]
    fn small_image_is_padded_only() {
        let img = RgbImage::from_gray(80, 60, &vec![7; 80 * 60]);
        let r = preprocess_image(&img, 128).unwrap();
        assert_eq!(r.scale, 1.0);
        assert_eq!((r.content_width, r.content_height), (80, 60));
        assert!(pad_is_zero(&r));
    }

    #[test]
    fn tall_image_is_scaled_by_height() {
        let img = RgbImage::from_gray(100, 400, &vec![1; 100 * 400]);
        let r = preprocess_image(&img, 200).unwrap();
        assert_eq!(r.scale, 0.5);
        assert_eq!((r.content_width, r.content_height), (50, 200));
    }

    #[test]
    fn zero_dimension_rejected() {
        let img = RgbImage::new(0, 10);
        assert_eq!(preprocess_image(&img, 64), Err(PreprocessError::EmptyImage(0, 10)));
    }

    #[test]
    fn original_dims_recoverable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..40 {
            let w = rng.gen_range(1..300);
            let h = rng.gen_range(1..300);
            let img = RgbImage::new(w, h);
            let r = preprocess_image(&img, 64).unwrap();
            assert!(r.content_width <= 64 && r.content_height <= 64);
            let canvas = SoftMask::filled(64, 64, 1.0).unwrap();
            let back = r.unpad_unscale(&canvas).unwrap();
            assert_eq!((back.width(), back.height()), (w, h));
        }
    }
}
