//! Training-target assignment: anchor labels, RoI labels and 28x28 mask
//! targets.

use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::MASK_SIZE;
use super::Result;
use crate::corpus::RegionInstance;
use crate::geometry::{binarize, box_iou, crop_and_resize, rasterize_polygon, BBox, BinaryMask};

pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Matched ground-truth index (set whenever at least one gt exists).
    pub gt: Option<usize>,
}

/// Labels anchors against ground-truth boxes.
///
/// Positive when IoU >= 0.7 with some gt or when the anchor is the best
/// anchor for some gt; negative when its best IoU is below 0.3; ignored
/// otherwise. Ties resolve to the lower gt index (and the lower anchor index
/// when picking a gt's best anchor).
pub fn assign_anchor_targets(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorTarget> {
    if gts.is_empty() {
        return vec![
            AnchorTarget {
                label: AnchorLabel::Negative,
                gt: None,
            };
            anchors.len()
        ];
    }
    let mut best_for_gt: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    let mut targets: Vec<AnchorTarget> = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (gi, g) in gts.iter().enumerate() {
            let iou = box_iou(a, g);
            if iou > best.0 {
                best = (iou, gi);
            }
            if iou > best_for_gt[gi].0 {
                best_for_gt[gi] = (iou, Some(ai));
            }
        }
        let label = if best.0 >= POSITIVE_IOU {
            AnchorLabel::Positive
        } else if best.0 < NEGATIVE_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        targets.push(AnchorTarget {
            label,
            gt: Some(best.1),
        });
    }
    for (gi, &(_, anchor)) in best_for_gt.iter().enumerate() {
        if let Some(ai) = anchor {
            let t = &mut targets[ai];
            if t.label != AnchorLabel::Positive {
                t.label = AnchorLabel::Positive;
                t.gt = Some(gi);
            }
        }
    }
    targets
}

/// Picks at most `total` labeled anchors, up to half of them positive.
/// Returns anchor indices, positives first, each group in ascending order.
pub fn sample_anchors<R: Rng>(targets: &[AnchorTarget], total: usize, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        match t.label {
            AnchorLabel::Positive => pos.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let n_pos = pos.len().min(total / 2);
    let n_neg = neg.len().min(total - n_pos);
    let mut pos: Vec<usize> = pos.choose_multiple(rng, n_pos).copied().collect();
    let mut neg: Vec<usize> = neg.choose_multiple(rng, n_neg).copied().collect();
    pos.sort_unstable();
    neg.sort_unstable();
    pos.extend(neg);
    pos
}

/// Matches each RoI to its best gt (ties to the lower index); `None` when the
/// best IoU is below `fg_threshold`.
pub fn assign_roi_targets(rois: &[BBox], gts: &[BBox], fg_threshold: f64) -> Vec<Option<usize>> {
    rois.iter()
        .map(|r| {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                let iou = box_iou(r, g);
                if best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            best.filter(|&(iou, _)| iou >= fg_threshold).map(|(_, gi)| gi)
        })
        .collect()
}

/// Crops a full-resolution region mask to `roi`, resizes it to 28x28 and
/// binarizes at 0.5.
pub fn mask_target_from_raster(full: &BinaryMask, roi: &BBox) -> Result<BinaryMask> {
    let crop = crop_and_resize(&full.to_soft(), roi, MASK_SIZE, MASK_SIZE)?;
    Ok(binarize(&crop, 0.5))
}

/// 28x28 mask target for `region` inside `roi`, rasterizing the region at
/// the document's full `width x height` resolution.
pub fn prepare_mask_target(
    region: &RegionInstance,
    roi: &BBox,
    width: usize,
    height: usize,
) -> Result<BinaryMask> {
    let full = rasterize_polygon(region.boundary.vertices(), height, width)?;
    mask_target_from_raster(&full, roi)
}
