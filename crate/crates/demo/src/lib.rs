//! Browser bindings for three interactive views: a synthetic page viewer,
//! an anchor explorer and a non-maximum suppression playground.
//!
//! Every binding is a thin wrapper over a plain function so the logic is
//! testable without a browser.

use mslayout_core::corpus::RegionClass;
use mslayout_core::detect::anchors::{generate_anchors, AnchorSpec, PYRAMID_LEVELS};
use mslayout_core::detect::targets::POSITIVE_IOU;
use mslayout_core::geometry::{box_iou, nms, BBox};
use mslayout_core::synth::{generate_document, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// A rendered synthetic page.
#[wasm_bindgen]
pub struct Page {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    regions: String,
}

#[wasm_bindgen]
impl Page {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixels as RGBA bytes, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// JSON list of `{class, name, points}` region outlines.
    pub fn regions(&self) -> String {
        self.regions.clone()
    }
}

/// Renders one page from a generator config (JSON, absent fields default).
pub fn render_page(config_json: &str, seed: u64) -> Result<Page, String> {
    let cfg: SynthConfig = if config_json.trim().is_empty() {
        SynthConfig::default()
    } else {
        serde_json::from_str(config_json).map_err(|e| e.to_string())?
    };
    let doc = generate_document(&cfg, seed, "demo").map_err(|e| e.to_string())?;
    let rgba = doc.image.pixels.iter().flat_map(|&v| [v, v, v, 255]).collect();
    let regions: Vec<_> = doc
        .annotation
        .regions
        .iter()
        .map(|r| {
            json!({
                "class": r.region_class.abbreviation(),
                "name": r.region_class.name(),
                "points": r.boundary.vertices(),
            })
        })
        .collect();
    Ok(Page {
        width: doc.image.width,
        height: doc.image.height,
        rgba,
        regions: serde_json::Value::from(regions).to_string(),
    })
}

#[wasm_bindgen(js_name = renderPage)]
pub fn render_page_js(config_json: &str, seed: u32) -> Result<Page, JsError> {
    render_page(config_json, seed as u64).map_err(|e| JsError::new(&e))
}

/// One anchor scored against a query box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorMatch {
    pub level: usize,
    pub ratio: String,
    pub bbox: [f64; 4],
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorReport {
    pub total_anchors: usize,
    /// Anchors at or above the positive-match IoU.
    pub positives: Vec<AnchorMatch>,
    /// Highest-IoU anchors, best first.
    pub best: Vec<AnchorMatch>,
}

/// Anchors of a square canvas matched against the box `query`.
pub fn match_anchors(canvas: usize, query: BBox, tall: bool, top: usize) -> Result<AnchorReport, String> {
    if canvas < 64 || !canvas.is_multiple_of(64) {
        return Err(format!("canvas must be a positive multiple of 64, got {canvas}"));
    }
    let spec = if tall { AnchorSpec::tall() } else { AnchorSpec::default() };
    let spec = spec.scaled(canvas as f64 / 1024.0);
    let mut side = canvas / 4;
    let dims: Vec<(usize, usize)> = (0..PYRAMID_LEVELS)
        .map(|_| {
            let d = (side, side);
            side = side.div_ceil(2);
            d
        })
        .collect();
    let anchors = generate_anchors(&dims, &spec).map_err(|e| e.to_string())?;
    let labels = spec.ratio_labels();
    let mut level_start = Vec::with_capacity(PYRAMID_LEVELS);
    let mut acc = 0;
    for (h, w) in &dims {
        level_start.push(acc);
        acc += h * w * 3;
    }
    let describe = |i: usize| {
        let level = level_start.iter().rposition(|&s| s <= i).unwrap_or(0);
        let a = anchors[i];
        AnchorMatch {
            level: level + 2,
            ratio: labels[i % 3].clone(),
            bbox: [a.x1, a.y1, a.x2, a.y2],
            iou: box_iou(&a, &query),
        }
    };
    let ious: Vec<f64> = anchors.iter().map(|a| box_iou(a, &query)).collect();
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| ious[b].total_cmp(&ious[a]).then(a.cmp(&b)));
    Ok(AnchorReport {
        total_anchors: anchors.len(),
        positives: order
            .iter()
            .take_while(|&&i| ious[i] >= POSITIVE_IOU)
            .map(|&i| describe(i))
            .collect(),
        best: order.iter().take(top).map(|&i| describe(i)).collect(),
    })
}

#[wasm_bindgen(js_name = matchAnchors)]
pub fn match_anchors_js(canvas: usize, x1: f64, y1: f64, x2: f64, y2: f64, tall: bool) -> Result<String, JsError> {
    let report = match_anchors(canvas, BBox::new(x1, y1, x2, y2), tall, 5).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&report).expect("reports serialize"))
}

/// A scored box as drawn in the playground.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct ScoredBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

/// Indices kept by greedy suppression, highest score first.
pub fn suppress(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let items: Vec<BBox> = boxes.iter().map(|b| BBox::new(b.x1, b.y1, b.x2, b.y2)).collect();
    nms(&scores, &items, iou_threshold, box_iou)
}

#[wasm_bindgen(js_name = suppress)]
pub fn suppress_js(boxes_json: &str, iou_threshold: f64) -> Result<String, JsError> {
    let boxes: Vec<ScoredBox> = serde_json::from_str(boxes_json).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(serde_json::to_string(&suppress(&boxes, iou_threshold)).expect("indices serialize"))
}

/// Region class abbreviations and names, in table order.
#[wasm_bindgen(js_name = regionClasses)]
pub fn region_classes() -> String {
    let list: Vec<_> = RegionClass::ALL
        .iter()
        .map(|c| json!({"class": c.abbreviation(), "name": c.name()}))
        .collect();
    serde_json::Value::from(list).to_string()
}
