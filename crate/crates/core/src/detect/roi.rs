//! Feature maps, pyramid level assignment and bilinear RoI warping.
//!
//! The warp samples one point at the center of each output bin. The same
//! sampling plan drives the differentiable warp in the model crate, so the
//! forward pass here and the one used in training agree exactly.

use super::{DetectError, Result};
use crate::geometry::BBox;

/// Dense `channels x height x width` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Five feature maps `P2..P6` sharing a channel depth.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub strides: Vec<f64>,
}

impl FeaturePyramid {
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.height, l.width)).collect()
    }
}

/// Spatial size of the next pyramid level.
pub fn half_ceil(n: usize) -> usize {
    n.div_ceil(2)
}

/// Level-assignment rule: `floor(4 + log2(sqrt(area) / canonical))` clamped
/// to `[2, 5]`. Returns the pyramid level number (2 means P2).
pub fn assign_level(roi: &BBox, canonical_size: f64) -> usize {
    let size = roi.area().max(1e-12).sqrt();
    let k = (4.0 + (size / canonical_size + 1e-9).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

/// One output cell of a warp: four `(flat index, weight)` taps into a plane.
pub type Taps = [(usize, f32); 4];

/// Bilinear taps for an `out_size x out_size` warp of `roi` (input-pixel
/// coordinates) over a map of `height x width` cells at `stride`.
///
/// Sample points falling more than one cell outside the map get zero weight.
pub fn sampling_plan(
    roi: &BBox,
    stride: f64,
    height: usize,
    width: usize,
    out_size: usize,
) -> Result<Vec<Taps>> {
    if roi.width() <= 0.0 || roi.height() <= 0.0 {
        return Err(DetectError::DegenerateBox(*roi));
    }
    let x0 = roi.x1 / stride;
    let y0 = roi.y1 / stride;
    let bin_w = roi.width() / stride / out_size as f64;
    let bin_h = roi.height() / stride / out_size as f64;
    let mut plan = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        let y = y0 + (i as f64 + 0.5) * bin_h - 0.5;
        for j in 0..out_size {
            let x = x0 + (j as f64 + 0.5) * bin_w - 0.5;
            plan.push(bilinear_taps(y, x, height, width));
        }
    }
    Ok(plan)
}

fn bilinear_taps(y: f64, x: f64, height: usize, width: usize) -> Taps {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return [(0, 0.0); 4];
    }
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let ly = (y - y0 as f64) as f32;
    let lx = (x - x0 as f64) as f32;
    [
        (y0 * width + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * width + x1, (1.0 - ly) * lx),
        (y1 * width + x0, ly * (1.0 - lx)),
        (y1 * width + x1, ly * lx),
    ]
}

/// Applies a sampling plan to every channel of `map`.
pub fn apply_plan(map: &FeatureMap, plan: &[Taps], out_size: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(map.channels, out_size, out_size);
    let cells = out_size * out_size;
    for c in 0..map.channels {
        let plane = map.plane(c);
        let dst = &mut out.data[c * cells..(c + 1) * cells];
        for (d, taps) in dst.iter_mut().zip(plan) {
            *d = taps.iter().map(|&(i, w)| plane[i] * w).sum();
        }
    }
    out
}

/// Warps `roi` from a single map at `stride` into `out_size x out_size`.
pub fn roi_warp_level(map: &FeatureMap, stride: f64, roi: &BBox, out_size: usize) -> Result<FeatureMap> {
    let plan = sampling_plan(roi, stride, map.height, map.width, out_size)?;
    Ok(apply_plan(map, &plan, out_size))
}

/// Warps `roi` from the pyramid level chosen by [`assign_level`].
pub fn roi_warp(
    pyramid: &FeaturePyramid,
    roi: &BBox,
    out_size: usize,
    canonical_size: f64,
) -> Result<FeatureMap> {
    if pyramid.levels.len() < 4 {
        return Err(DetectError::LevelCount {
            expected: 5,
            got: pyramid.levels.len(),
        });
    }
    if roi.width() <= 0.0 || roi.height() <= 0.0 {
        return Err(DetectError::DegenerateBox(*roi));
    }
    let level = assign_level(roi, canonical_size) - 2;
    roi_warp_level(&pyramid.levels[level], pyramid.strides[level], roi, out_size)
}
