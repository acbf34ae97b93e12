//! Differentiable multi-level RoI warping.
//!
//! Uses the same sampling plans as the reference warp in the core crate, so
//! the forward values agree exactly; the backward pass scatters through the
//! recorded taps.

use mslayout_core::detect::roi::{assign_level, sampling_plan, Taps};
use mslayout_core::detect::Result;
use mslayout_core::geometry::BBox;

use crate::tensor::Tensor;

/// Which level a RoI was read from and the taps used.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    pub level: usize,
    pub taps: Vec<Taps>,
}

/// Warps every RoI from the level picked by the level-assignment rule.
///
/// `levels` are the `P2..P5` maps (batch 1); the result is `C x N x out x out`.
pub fn roi_align(
    levels: &[Tensor],
    strides: &[f64],
    rois: &[BBox],
    out: usize,
    canonical_size: f64,
) -> Result<(Tensor, Vec<RoiPlan>)> {
    let c = levels[0].c;
    let cells = out * out;
    let mut y = Tensor::zeros(c, rois.len(), out, out);
    let mut plans = Vec::with_capacity(rois.len());
    for (ri, roi) in rois.iter().enumerate() {
        let level = (assign_level(roi, canonical_size) - 2).min(levels.len() - 1);
        let map = &levels[level];
        let taps = sampling_plan(roi, strides[level], map.h, map.w, out)?;
        let hw = map.h * map.w;
        for ch in 0..c {
            let plane = &map.data[ch * hw..(ch + 1) * hw];
            let dst = &mut y.data[(ch * rois.len() + ri) * cells..(ch * rois.len() + ri + 1) * cells];
            for (d, t) in dst.iter_mut().zip(&taps) {
                *d = t.iter().map(|&(i, w)| plane[i] * w).sum();
            }
        }
        plans.push(RoiPlan { level, taps });
    }
    Ok((y, plans))
}

/// Accumulates the warp gradient into the per-level gradient maps.
pub fn roi_align_backward(grads: &mut [Tensor], plans: &[RoiPlan], dy: &Tensor) {
    let cells = dy.h * dy.w;
    let n = plans.len();
    for (ri, plan) in plans.iter().enumerate() {
        let g = &mut grads[plan.level];
        let hw = g.h * g.w;
        for ch in 0..dy.c {
            let src = &dy.data[(ch * n + ri) * cells..(ch * n + ri + 1) * cells];
            let plane = &mut g.data[ch * hw..(ch + 1) * hw];
            for (&v, t) in src.iter().zip(&plan.taps) {
                for &(i, w) in t {
                    plane[i] += v * w;
                }
            }
        }
    }
}
