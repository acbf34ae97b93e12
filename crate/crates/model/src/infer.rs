//! The inference pipeline: preprocess, propose, classify, segment, paste
//! back into the original frame and suppress duplicate masks.

use serde::{Deserialize, Serialize};

use mslayout_core::corpus::{DocumentAnnotation, Polygon, RegionClass, RegionInstance, ShapeKind};
use mslayout_core::detect::anchors::decode_box_deltas;
use mslayout_core::detect::losses::MASK_SIZE;
use mslayout_core::detect::rpn::{rpn_propose, Proposal, ProposalConfig, RpnOutput};
use mslayout_core::geometry::{
    binarize, mask_iou, mask_to_box, mask_to_polygon, nms, paste_into, BBox, BinaryMask, SoftMask,
};
use mslayout_core::preprocess::{preprocess_image, PreprocessResult, RgbImage};

use crate::net::{scaled_deltas, Network, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub proposals_after_nms: usize,
    pub max_detections: usize,
    pub detection_score_floor: f64,
    pub mask_binarize_threshold: f32,
    pub final_mask_nms_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            proposals_after_nms: 1000,
            max_detections: 100,
            detection_score_floor: 0.5,
            mask_binarize_threshold: 0.4,
            final_mask_nms_threshold: 0.5,
        }
    }
}

/// The heads' verdict on one RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiVerdict {
    /// `None` when background wins.
    pub class: Option<RegionClass>,
    pub score: f64,
    /// RoI refined by the class-specific regression, in canvas coordinates.
    pub bbox: BBox,
}

/// One scored, classed detection on the network canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub region_class: RegionClass,
    pub score: f64,
    pub bbox: BBox,
    /// 28x28 box-relative mask probabilities.
    pub mask28: SoftMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedInstance {
    pub region_class: RegionClass,
    pub score: f64,
    /// Mask at original image resolution.
    pub mask: BinaryMask,
    /// Tight box of the mask in original image coordinates.
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLayout {
    pub width: usize,
    pub height: usize,
    /// Descending score.
    pub instances: Vec<ParsedInstance>,
}

/// How many items survived each pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub proposals: usize,
    /// Proposals classified as a region class (not background).
    pub foreground: usize,
    /// Foreground proposals scoring strictly above the floor.
    pub above_floor: usize,
    /// Detections kept for the mask head.
    pub detections: usize,
    /// Masks whose binarized 28x28 grid has at least one set cell.
    pub binarized_nonempty: usize,
    /// Masks non-empty after pasting into the original frame.
    pub pasted_nonempty: usize,
    /// Instances surviving the final mask suppression.
    pub final_instances: usize,
    /// Proposal cap requested from the model.
    pub proposal_cap: usize,
}

/// The three model stages the pipeline drives.
pub trait LayoutModel {
    type Features;

    fn canvas_size(&self) -> usize;
    fn features(&self, input: &PreprocessResult) -> Result<Self::Features>;
    /// Proposals in canvas coordinates, at most `cfg.max_proposals`.
    fn propose(&self, features: &Self::Features, content: (f64, f64), cfg: &ProposalConfig) -> Result<Vec<Proposal>>;
    fn classify(&self, features: &Self::Features, rois: &[BBox], content: (f64, f64)) -> Result<Vec<RoiVerdict>>;
    /// 28x28 mask probabilities of `classes[i]` inside `rois[i]`.
    fn masks(&self, features: &Self::Features, rois: &[BBox], classes: &[RegionClass]) -> Result<Vec<SoftMask>>;
}

impl LayoutModel for Network {
    type Features = Vec<Tensor>;

    fn canvas_size(&self) -> usize {
        self.config.canvas
    }

    fn features(&self, input: &PreprocessResult) -> Result<Vec<Tensor>> {
        let x = self.input_tensor(&input.canvas)?;
        Ok(Network::features(self, &x).levels)
    }

    fn propose(&self, levels: &Vec<Tensor>, content: (f64, f64), cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
        let (raw, _) = self.rpn(levels);
        let out = RpnOutput {
            objectness: raw.objectness(),
            deltas: raw.box_deltas(),
        };
        Ok(rpn_propose(&out, &self.config.anchors()?, Some(content), cfg)?)
    }

    fn classify(&self, levels: &Vec<Tensor>, rois: &[BBox], content: (f64, f64)) -> Result<Vec<RoiVerdict>> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.box_head(levels, rois)?;
        let mut verdicts = Vec::with_capacity(rois.len());
        for (i, roi) in rois.iter().enumerate() {
            let logits = &out.class_logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            let probs = mslayout_core::detect::losses::softmax(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if probs[k] > probs[best] {
                    best = k;
                }
            }
            let (class, bbox) = if best == 0 {
                (None, *roi)
            } else {
                let off = (i * NUM_CLASSES + best) * 4;
                let d = scaled_deltas(&out.deltas[off..off + 4]);
                let b = decode_box_deltas(roi, d)?.clip(content.0, content.1);
                (RegionClass::from_index(best - 1), b)
            };
            verdicts.push(RoiVerdict {
                class,
                score: probs[best],
                bbox,
            });
        }
        Ok(verdicts)
    }

    fn masks(&self, levels: &Vec<Tensor>, rois: &[BBox], classes: &[RegionClass]) -> Result<Vec<SoftMask>> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.mask_head(levels, rois)?;
        let n = rois.len();
        let cells = MASK_SIZE * MASK_SIZE;
        classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let off = (c.index() * n + i) * cells;
                let probs = out.logits.data[off..off + cells]
                    .iter()
                    .map(|&z| 1.0 / (1.0 + (-z).exp()))
                    .collect();
                Ok(SoftMask::from_values(MASK_SIZE, MASK_SIZE, probs)?)
            })
            .collect()
    }
}

/// Runs the whole pipeline on one image.
pub fn run_inference<M: LayoutModel>(
    model: &M,
    image: &RgbImage,
    cfg: &InferenceConfig,
) -> Result<(ParsedLayout, PipelineTrace)> {
    let pre = preprocess_image(image, model.canvas_size())?;
    let content = (pre.content_width as f64, pre.content_height as f64);
    let features = model.features(&pre)?;
    let pcfg = ProposalConfig {
        max_proposals: cfg.proposals_after_nms,
        ..ProposalConfig::inference()
    };
    let mut trace = PipelineTrace {
        proposal_cap: pcfg.max_proposals,
        ..PipelineTrace::default()
    };
    let mut proposals = model.propose(&features, content, &pcfg)?;
    proposals.truncate(cfg.proposals_after_nms);
    proposals.retain(|p| p.bbox.width() > 0.0 && p.bbox.height() > 0.0);
    trace.proposals = proposals.len();
    let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let verdicts = model.classify(&features, &rois, content)?;

    let mut kept: Vec<(RegionClass, f64, BBox)> = verdicts
        .iter()
        .filter_map(|v| v.class.map(|c| (c, v.score, v.bbox)))
        .collect();
    trace.foreground = kept.len();
    kept.retain(|&(_, s, b)| s > cfg.detection_score_floor && b.width() > 0.0 && b.height() > 0.0);
    trace.above_floor = kept.len();
    // stable: equal scores keep proposal order
    kept.sort_by(|a, b| b.1.total_cmp(&a.1));
    kept.truncate(cfg.max_detections);
    trace.detections = kept.len();

    let boxes: Vec<BBox> = kept.iter().map(|k| k.2).collect();
    let classes: Vec<RegionClass> = kept.iter().map(|k| k.0).collect();
    let masks = model.masks(&features, &boxes, &classes)?;
    let detections: Vec<Detection> = kept
        .into_iter()
        .zip(masks)
        .map(|((region_class, score, bbox), mask28)| Detection {
            region_class,
            score,
            bbox,
            mask28,
        })
        .collect();
    let layout = postprocess_with_trace(&detections, &pre, cfg, &mut trace)?;
    Ok((layout, trace))
}

/// Pastes detections into the original frame and removes duplicates.
///
/// Each 28x28 mask is binarized at the configured threshold, pasted
/// bilinearly into its box mapped to original coordinates, re-binarized at
/// one half, and suppressed per class by mask IoU.
pub fn postprocess_masks(
    detections: &[Detection],
    pre: &PreprocessResult,
    cfg: &InferenceConfig,
) -> Result<ParsedLayout> {
    postprocess_with_trace(detections, pre, cfg, &mut PipelineTrace::default())
}

fn postprocess_with_trace(
    detections: &[Detection],
    pre: &PreprocessResult,
    cfg: &InferenceConfig,
    trace: &mut PipelineTrace,
) -> Result<ParsedLayout> {
    let (w, h) = (pre.original_width, pre.original_height);
    let mut candidates: Vec<ParsedInstance> = Vec::new();
    for d in detections {
        let grid = binarize(&d.mask28, cfg.mask_binarize_threshold);
        if grid.is_empty() {
            continue;
        }
        trace.binarized_nonempty += 1;
        let bbox = d.bbox.scale(1.0 / pre.scale);
        let pasted = paste_into(&grid.to_soft(), &bbox, h, w)?;
        let mask = binarize(&pasted, 0.5);
        let Some(tight) = mask_to_box(&mask) else { continue };
        candidates.push(ParsedInstance {
            region_class: d.region_class,
            score: d.score,
            mask,
            bbox: tight,
        });
    }
    trace.pasted_nonempty = candidates.len();
    let mut instances = Vec::new();
    for class in RegionClass::ALL {
        let same: Vec<&ParsedInstance> = candidates.iter().filter(|c| c.region_class == class).collect();
        if same.is_empty() {
            continue;
        }
        let scores: Vec<f64> = same.iter().map(|c| c.score).collect();
        let masks: Vec<&BinaryMask> = same.iter().map(|c| &c.mask).collect();
        let keep = nms(&scores, &masks, cfg.final_mask_nms_threshold, |a, b| {
            mask_iou(a, b).unwrap_or(0.0)
        });
        instances.extend(keep.into_iter().map(|i| same[i].clone()));
    }
    instances.sort_by(|a, b| b.score.total_cmp(&a.score));
    trace.final_instances = instances.len();
    Ok(ParsedLayout {
        width: w,
        height: h,
        instances,
    })
}

/// Converts a parsed layout into an annotation record whose regions carry
/// scores. Polygons trace the mask outlines, so rasterizing them reproduces
/// the masks exactly.
pub fn layout_to_annotation(layout: &ParsedLayout, template: &DocumentAnnotation) -> Result<DocumentAnnotation> {
    let mut doc = template.clone();
    doc.regions.clear();
    for inst in &layout.instances {
        let Some(vertices) = mask_to_polygon(&inst.mask) else { continue };
        let mut region = RegionInstance::new(inst.region_class, Polygon::new(ShapeKind::Freehand, vertices)?);
        region.score = Some(inst.score);
        doc.regions.push(region);
    }
    Ok(doc)
}
