//! Output contract of mask post-processing over random detections.

use mslayout_core::corpus::RegionClass;
use mslayout_core::geometry::{mask_iou, BBox, SoftMask};
use mslayout_core::preprocess::{preprocess_image, RgbImage};
use mslayout_model::infer::{postprocess_masks, Detection, InferenceConfig};
use proptest::prelude::*;

fn detection() -> impl Strategy<Value = Detection> {
    (
        0usize..3,
        0.5..1.0f64,
        (0.0..50.0f64, 0.0..50.0f64, 2.0..30.0f64, 2.0..30.0f64),
        0.0..1.0f32,
        0.0..1.0f32,
    )
        .prop_map(|(c, score, (x, y, w, h), lo, hi)| Detection {
            region_class: [RegionClass::CharacterLineSegment, RegionClass::Hole, RegionClass::Picture][c],
            score,
            bbox: BBox::new(x, y, x + w, y + h),
            mask28: SoftMask::from_values(28, 28, (0..28 * 28).map(|i| if i % 28 < 14 { lo } else { hi }).collect())
                .unwrap(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layouts_are_sorted_full_frame_and_deduplicated(
        dets in prop::collection::vec(detection(), 0..12),
        (w, h) in (40usize..160, 40usize..160),
    ) {
        let pre = preprocess_image(&RgbImage::new(w, h), 64).unwrap();
        let cfg = InferenceConfig::default();
        let layout = postprocess_masks(&dets, &pre, &cfg).unwrap();
        prop_assert_eq!((layout.width, layout.height), (w, h));
        prop_assert!(layout.instances.len() <= dets.len());
        prop_assert!(layout.instances.windows(2).all(|p| p[0].score >= p[1].score));
        for (i, a) in layout.instances.iter().enumerate() {
            prop_assert_eq!((a.mask.width(), a.mask.height()), (w, h));
            prop_assert!(!a.mask.is_empty());
            for b in &layout.instances[i + 1..] {
                if a.region_class == b.region_class {
                    prop_assert!(mask_iou(&a.mask, &b.mask).unwrap() <= cfg.final_mask_nms_threshold);
                }
            }
        }
    }
}
