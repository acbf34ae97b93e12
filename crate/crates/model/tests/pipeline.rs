//! The inference pipeline driven by a scripted model whose outputs are known,
//! so every stage counter has an exact expected value.

use std::cell::RefCell;

use mslayout_core::corpus::RegionClass;
use mslayout_core::detect::rpn::{Proposal, ProposalConfig};
use mslayout_core::geometry::{BBox, SoftMask};
use mslayout_core::preprocess::{preprocess_image, PreprocessResult, RgbImage};
use mslayout_model::infer::{
    postprocess_masks, run_inference, Detection, InferenceConfig, LayoutModel, RoiVerdict,
};
use mslayout_model::Result;

const CANVAS: usize = 64;

/// Proposal `i` is a distinct box; its verdict and mask follow from `i`.
struct Scripted {
    proposals: usize,
    all_background: bool,
    seen_cap: RefCell<usize>,
    mask_calls: RefCell<Vec<usize>>,
}

impl Scripted {
    fn new(proposals: usize, all_background: bool) -> Self {
        Scripted {
            proposals,
            all_background,
            seen_cap: RefCell::new(0),
            mask_calls: RefCell::new(Vec::new()),
        }
    }
}

/// Cell `j` of a 5x5 grid, inset by one pixel so pasted masks never touch.
fn cell(j: usize) -> BBox {
    let (x, y) = ((j % 5) as f64 * 12.0, (j / 5) as f64 * 12.0);
    BBox::new(x + 1.0, y + 1.0, x + 11.0, y + 11.0)
}

impl LayoutModel for Scripted {
    type Features = ();

    fn canvas_size(&self) -> usize {
        CANVAS
    }

    fn features(&self, _: &PreprocessResult) -> Result<()> {
        Ok(())
    }

    fn propose(&self, _: &(), _: (f64, f64), cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
        *self.seen_cap.borrow_mut() = cfg.max_proposals;
        Ok((0..self.proposals)
            .map(|i| Proposal {
                bbox: BBox::new(0.0, 0.0, 1.0 + (i % 50) as f64, 1.0 + (i / 50) as f64),
                score: 1.0,
                anchor: i,
            })
            .collect())
    }

    fn classify(&self, _: &(), rois: &[BBox], _: (f64, f64)) -> Result<Vec<RoiVerdict>> {
        Ok((0..rois.len())
            .map(|i| {
                let (class, score) = match i {
                    _ if self.all_background => (None, 0.99),
                    0..=99 => {
                        let c = if i < 50 { RegionClass::CharacterLineSegment } else { RegionClass::Hole };
                        (Some(c), 0.9 - i as f64 * 0.001)
                    }
                    // more confident than the first hundred, but below the floor or at it
                    100..=199 => (Some(RegionClass::Picture), 0.5),
                    200..=299 => (Some(RegionClass::Decorator), 0.49),
                    _ => (None, 0.8),
                };
                RoiVerdict {
                    class,
                    score,
                    bbox: cell(i % 25),
                }
            })
            .collect())
    }

    fn masks(&self, _: &(), rois: &[BBox], _: &[RegionClass]) -> Result<Vec<SoftMask>> {
        self.mask_calls.borrow_mut().push(rois.len());
        Ok((0..rois.len())
            .map(|k| {
                // detections arrive in score order, so k is the proposal index
                let v = if k % 10 == 9 { 0.39 } else { 0.4 };
                SoftMask::filled(28, 28, v).unwrap()
            })
            .collect())
    }
}

#[test]
fn stage_counters_follow_the_configured_chain() {
    let model = Scripted::new(1200, false);
    let image = RgbImage::new(CANVAS, CANVAS);
    let (layout, trace) = run_inference(&model, &image, &InferenceConfig::default()).unwrap();
    assert_eq!(*model.seen_cap.borrow(), 1000);
    assert_eq!(trace.proposal_cap, 1000);
    assert_eq!(trace.proposals, 1000);
    assert_eq!(trace.foreground, 300);
    // a score equal to the 0.5 floor does not pass
    assert_eq!(trace.above_floor, 100);
    assert_eq!(trace.detections, 100);
    assert_eq!(*model.mask_calls.borrow(), vec![100]);
    // 0.4 survives binarization, 0.39 does not
    assert_eq!(trace.binarized_nonempty, 90);
    assert_eq!(trace.pasted_nonempty, 90);
    // same class in the same cell collapses; classes never suppress each other
    assert_eq!(trace.final_instances, 50);
    assert_eq!(layout.instances.len(), 50);
    let cls = layout
        .instances
        .iter()
        .filter(|i| i.region_class == RegionClass::CharacterLineSegment)
        .count();
    assert_eq!(cls, 25);
    assert!(layout.instances.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(layout.instances[0].score, 0.9);
}

#[test]
fn detection_cap_applies_after_the_floor() {
    let model = Scripted::new(1200, false);
    let cfg = InferenceConfig {
        max_detections: 30,
        ..InferenceConfig::default()
    };
    let (_, trace) = run_inference(&model, &RgbImage::new(CANVAS, CANVAS), &cfg).unwrap();
    assert_eq!((trace.above_floor, trace.detections), (100, 30));
    assert_eq!(*model.mask_calls.borrow(), vec![30]);
}

#[test]
fn all_background_yields_an_empty_layout() {
    let model = Scripted::new(1200, true);
    let (layout, trace) = run_inference(&model, &RgbImage::new(CANVAS, CANVAS), &InferenceConfig::default()).unwrap();
    assert!(layout.instances.is_empty());
    assert_eq!((trace.proposals, trace.foreground, trace.detections, trace.final_instances), (1000, 0, 0, 0));
}

fn detection(class: RegionClass, score: f64, bbox: BBox) -> Detection {
    Detection {
        region_class: class,
        score,
        bbox,
        mask28: SoftMask::filled(28, 28, 1.0).unwrap(),
    }
}

fn blank(size: usize) -> PreprocessResult {
    preprocess_image(&RgbImage::new(size, size), size).unwrap()
}

#[test]
fn mask_suppression_is_strictly_above_one_half() {
    let pre = blank(64);
    let outer = BBox::new(0.0, 0.0, 20.0, 20.0);
    let half = BBox::new(0.0, 0.0, 20.0, 10.0);
    let more = BBox::new(0.0, 0.0, 20.0, 19.0);
    let layout = postprocess_masks(
        &[
            detection(RegionClass::Picture, 0.9, outer),
            detection(RegionClass::Picture, 0.8, half),
            detection(RegionClass::Picture, 0.7, more),
            detection(RegionClass::Decorator, 0.6, outer),
        ],
        &pre,
        &InferenceConfig::default(),
    )
    .unwrap();
    let counts: Vec<(RegionClass, usize)> = layout
        .instances
        .iter()
        .map(|i| (i.region_class, i.mask.count()))
        .collect();
    assert_eq!(
        counts,
        vec![
            (RegionClass::Picture, 400),
            (RegionClass::Picture, 200),
            (RegionClass::Decorator, 400)
        ]
    );
}

#[test]
fn masks_are_pasted_into_the_original_frame() {
    // a 128x128 image is halved onto the 64 canvas
    let pre = preprocess_image(&RgbImage::new(128, 128), 64).unwrap();
    assert_eq!(pre.scale, 0.5);
    let layout = postprocess_masks(
        &[detection(RegionClass::Hole, 0.9, BBox::new(10.0, 10.0, 30.0, 20.0))],
        &pre,
        &InferenceConfig::default(),
    )
    .unwrap();
    assert_eq!((layout.width, layout.height), (128, 128));
    assert_eq!(layout.instances[0].bbox, BBox::new(20.0, 20.0, 60.0, 40.0));
    assert_eq!(layout.instances[0].mask.count(), 40 * 20);
}
