//! Instance-segmentation metrics: mask AP at IoU thresholds and the
//! document-averaged class-wise IoU and pixel accuracy, plus table rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Collection, CorpusManifest, DocumentAnnotation, RegionClass, Split};
use crate::geometry::{descending_order, rasterize_polygon, BinaryMask, GeometryError};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predicted documents missing from ground truth: {0:?}")]
    UnknownDocuments(Vec<String>),
    #[error("documents not assigned a split in the manifest: {0:?}")]
    Unassigned(Vec<String>),
    #[error("doc {doc_id}: prediction is {pred_w}x{pred_h} but ground truth is {gt_w}x{gt_h}")]
    DimensionMismatch {
        doc_id: String,
        pred_w: u32,
        pred_h: u32,
        gt_w: u32,
        gt_h: u32,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A predicted mask with its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub score: f64,
    pub mask: BinaryMask,
}

/// Pixel overlap between every prediction and every gt of one class in one
/// document. All metrics are computed from these counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverlapTable {
    pub scores: Vec<f64>,
    pub pred_pixels: Vec<usize>,
    pub gt_pixels: Vec<usize>,
    /// `intersections[p][g]`.
    pub intersections: Vec<Vec<usize>>,
}

impl OverlapTable {
    pub fn from_masks(preds: &[ScoredMask], gts: &[BinaryMask]) -> Result<Self> {
        let mut intersections = Vec::with_capacity(preds.len());
        for p in preds {
            let row = gts
                .iter()
                .map(|g| p.mask.intersection_count(g))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            intersections.push(row);
        }
        Ok(OverlapTable {
            scores: preds.iter().map(|p| p.score).collect(),
            pred_pixels: preds.iter().map(|p| p.mask.count()).collect(),
            gt_pixels: gts.iter().map(BinaryMask::count).collect(),
            intersections,
        })
    }

    pub fn num_preds(&self) -> usize {
        self.scores.len()
    }

    pub fn num_gts(&self) -> usize {
        self.gt_pixels.len()
    }

    /// Mask IoU of prediction `p` and gt `g`; 0 when both are empty.
    pub fn iou(&self, p: usize, g: usize) -> f64 {
        let inter = self.intersections[p][g];
        let union = self.pred_pixels[p] + self.gt_pixels[g] - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Fraction of gt `g`'s pixels covered by prediction `p`.
    pub fn gt_recall(&self, p: usize, g: usize) -> f64 {
        if self.gt_pixels[g] == 0 {
            0.0
        } else {
            self.intersections[p][g] as f64 / self.gt_pixels[g] as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Matched gt per prediction (input order); `None` is a false positive.
    pub pred_gt: Vec<Option<usize>>,
    /// Matched prediction per gt; `None` is a miss.
    pub gt_pred: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn is_tp(&self, pred: usize) -> bool {
        self.pred_gt[pred].is_some()
    }

    pub fn matched_gts(&self) -> usize {
        self.gt_pred.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy matching in descending score order (ties to the lower index):
/// each prediction takes the unmatched gt with the highest IoU, provided
/// that IoU is at least `iou_threshold`.
pub fn match_detections(table: &OverlapTable, iou_threshold: f64) -> MatchResult {
    let mut pred_gt = vec![None; table.num_preds()];
    let mut gt_pred = vec![None; table.num_gts()];
    for p in descending_order(&table.scores) {
        let mut best: Option<(f64, usize)> = None;
        for (g, taken) in gt_pred.iter().enumerate() {
            if taken.is_some() {
                continue;
            }
            let iou = table.iou(p, g);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            pred_gt[p] = Some(g);
            gt_pred[g] = Some(p);
        }
    }
    MatchResult { pred_gt, gt_pred }
}

/// Area under the interpolated precision-recall curve given score-ranked
/// TP/FP flags and the number of gts.
pub fn ap_from_ranked(tp_flags: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = tp_flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    tp_flags
        .iter()
        .zip(&envelope)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| p / num_gts as f64)
        .fold(0.0, |acc, p| acc + p)
}

/// AP of one class over several documents. Predictions are matched within
/// their document and ranked jointly. `None` when the class has no gts.
pub fn class_average_precision(tables: &[&OverlapTable], iou_threshold: f64) -> Option<f64> {
    let num_gts: usize = tables.iter().map(|t| t.num_gts()).sum();
    if num_gts == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for t in tables {
        let m = match_detections(t, iou_threshold);
        ranked.extend(t.scores.iter().enumerate().map(|(p, &s)| (s, m.is_tp(p))));
    }
    // stable: ties keep document order, then prediction order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    Some(ap_from_ranked(&flags, num_gts))
}

/// Equal-weight mean of per-class AP over classes that have gts.
/// `per_class[c]` lists one table per document.
pub fn average_precision(per_class: &[Vec<&OverlapTable>], iou_threshold: f64) -> Option<f64> {
    let aps: Vec<f64> = per_class
        .iter()
        .filter_map(|tables| class_average_precision(tables, iou_threshold))
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApSummary {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over [`AP_THRESHOLDS`].
    pub ap_mean: f64,
}

pub fn ap_summary(per_class: &[Vec<&OverlapTable>]) -> Option<ApSummary> {
    let aps: Vec<f64> = AP_THRESHOLDS
        .iter()
        .map(|&t| average_precision(per_class, t))
        .collect::<Option<_>>()?;
    Some(ApSummary {
        ap50: aps[0],
        ap75: aps[5],
        ap_mean: aps.iter().sum::<f64>() / aps.len() as f64,
    })
}

/// One-to-one assignment for the class-wise scores: repeatedly pair the
/// unmatched prediction and gt with the highest IoU (ties to the lower gt,
/// then lower prediction index) until no overlapping pair is left.
/// Returns the matched prediction per gt.
pub fn overlap_assignment(table: &OverlapTable) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for p in 0..table.num_preds() {
        for g in 0..table.num_gts() {
            let iou = table.iou(p, g);
            if iou > 0.0 {
                pairs.push((iou, g, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_pred = vec![None; table.num_gts()];
    let mut pred_used = vec![false; table.num_preds()];
    for (_, g, p) in pairs {
        if gt_pred[g].is_none() && !pred_used[p] {
            gt_pred[g] = Some(p);
            pred_used[p] = true;
        }
    }
    gt_pred
}

/// Per-document class scores `(cwIoU, pwAcc)`: the mean over gt regions of
/// the matched IoU and of the recovered gt-pixel fraction, unmatched gts
/// scoring 0. `None` when the document has no gt of the class.
pub fn class_scores_document(table: &OverlapTable) -> Option<(f64, f64)> {
    let n = table.num_gts();
    if n == 0 {
        return None;
    }
    let assignment = overlap_assignment(table);
    let (mut iou, mut acc) = (0.0, 0.0);
    for (g, p) in assignment.iter().enumerate() {
        if let Some(p) = *p {
            iou += table.iou(p, g);
            acc += table.gt_recall(p, g);
        }
    }
    Some((iou / n as f64, acc / n as f64))
}

pub fn class_iou_document(table: &OverlapTable) -> Option<f64> {
    class_scores_document(table).map(|s| s.0)
}

pub fn class_acc_document(table: &OverlapTable) -> Option<f64> {
    class_scores_document(table).map(|s| s.1)
}

/// Unweighted mean of per-document scores; `None` for no documents.
pub fn corpus_mean(doc_scores: &[f64]) -> Option<f64> {
    if doc_scores.is_empty() {
        None
    } else {
        Some(doc_scores.iter().sum::<f64>() / doc_scores.len() as f64)
    }
}

pub fn class_iou_corpus(doc_scores: &[f64]) -> Option<f64> {
    corpus_mean(doc_scores)
}

pub fn class_acc_corpus(doc_scores: &[f64]) -> Option<f64> {
    corpus_mean(doc_scores)
}

/// Overlap tables for every class of one document.
#[derive(Debug, Clone)]
pub struct DocumentEval {
    pub doc_id: String,
    pub collection: Collection,
    pub tables: Vec<OverlapTable>,
}

/// Rasterizes ground truth and predictions of one document at its full
/// resolution. Predictions without a score count as score 1.
pub fn document_eval(gt: &DocumentAnnotation, pred: Option<&DocumentAnnotation>) -> Result<DocumentEval> {
    let (w, h) = (gt.width as usize, gt.height as usize);
    if let Some(p) = pred {
        if (p.width, p.height) != (gt.width, gt.height) {
            return Err(EvalError::DimensionMismatch {
                doc_id: gt.doc_id.clone(),
                pred_w: p.width,
                pred_h: p.height,
                gt_w: gt.width,
                gt_h: gt.height,
            });
        }
    }
    let mut gts: Vec<Vec<BinaryMask>> = vec![Vec::new(); RegionClass::COUNT];
    for r in &gt.regions {
        gts[r.region_class.index()].push(rasterize_polygon(r.boundary.vertices(), h, w)?);
    }
    let mut preds: Vec<Vec<ScoredMask>> = vec![Vec::new(); RegionClass::COUNT];
    for r in pred.map(|p| p.regions.as_slice()).unwrap_or_default() {
        preds[r.region_class.index()].push(ScoredMask {
            score: r.score.unwrap_or(1.0),
            mask: rasterize_polygon(r.boundary.vertices(), h, w)?,
        });
    }
    let tables = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| OverlapTable::from_masks(p, g))
        .collect::<Result<_>>()?;
    Ok(DocumentEval {
        doc_id: gt.doc_id.clone(),
        collection: gt.collection,
        tables,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: RegionClass,
    /// Documents containing the class in ground truth.
    pub documents: usize,
    pub iou: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectionReport {
    pub name: String,
    pub documents: usize,
    /// `None` when the collection has no gt regions at all.
    pub ap: Option<ApSummary>,
    /// Only classes present in ground truth, in metric-table order.
    pub classes: Vec<ClassMetrics>,
}

impl CollectionReport {
    pub fn class(&self, class: RegionClass) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Metrics for every collection present plus a `Combined` row (last).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub collections: Vec<CollectionReport>,
}

pub const COMBINED: &str = "Combined";

/// Aggregates per-document tables into one report row.
pub fn summarize(name: &str, docs: &[&DocumentEval]) -> CollectionReport {
    let per_class: Vec<Vec<&OverlapTable>> = (0..RegionClass::COUNT)
        .map(|c| docs.iter().map(|d| &d.tables[c]).collect())
        .collect();
    let classes = RegionClass::METRIC_ORDER
        .iter()
        .filter_map(|&class| {
            let scores: Vec<(f64, f64)> = per_class[class.index()]
                .iter()
                .filter_map(|t| class_scores_document(t))
                .collect();
            let ious: Vec<f64> = scores.iter().map(|s| s.0).collect();
            let accs: Vec<f64> = scores.iter().map(|s| s.1).collect();
            Some(ClassMetrics {
                class,
                documents: scores.len(),
                iou: class_iou_corpus(&ious)?,
                acc: class_acc_corpus(&accs)?,
            })
        })
        .collect();
    CollectionReport {
        name: name.to_string(),
        documents: docs.len(),
        ap: ap_summary(&per_class),
        classes,
    }
}

/// Evaluates `preds` against every document of `gts`. Ground-truth
/// documents without predictions count as empty predictions.
pub fn evaluate(preds: &[DocumentAnnotation], gts: &[DocumentAnnotation]) -> Result<EvalReport> {
    let gt_ids: BTreeSet<&str> = gts.iter().map(|d| d.doc_id.as_str()).collect();
    let unknown: Vec<String> = preds
        .iter()
        .filter(|p| !gt_ids.contains(p.doc_id.as_str()))
        .map(|p| p.doc_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownDocuments(unknown));
    }
    let pred_by_id: BTreeMap<&str, &DocumentAnnotation> =
        preds.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    // ordered by doc_id so the reduction order is fixed
    let mut sorted: Vec<&DocumentAnnotation> = gts.iter().collect();
    sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let docs = sorted
        .iter()
        .map(|g| document_eval(g, pred_by_id.get(g.doc_id.as_str()).copied()))
        .collect::<Result<Vec<_>>>()?;
    let mut collections = Vec::new();
    for coll in Collection::ALL {
        let members: Vec<&DocumentEval> = docs.iter().filter(|d| d.collection == coll).collect();
        if !members.is_empty() {
            collections.push(summarize(coll.label(), &members));
        }
    }
    let all: Vec<&DocumentEval> = docs.iter().collect();
    collections.push(summarize(COMBINED, &all));
    Ok(EvalReport { collections })
}

/// Evaluates the documents of one split (all documents for `None`).
///
/// Fails when a predicted document has no ground truth or a ground-truth
/// document has no split.
pub fn emit_report(
    preds: &[DocumentAnnotation],
    gts: &[DocumentAnnotation],
    manifest: &CorpusManifest,
    split: Option<Split>,
) -> Result<EvalReport> {
    let gt_ids: BTreeSet<&str> = gts.iter().map(|d| d.doc_id.as_str()).collect();
    let unknown: Vec<String> = preds
        .iter()
        .filter(|p| !gt_ids.contains(p.doc_id.as_str()))
        .map(|p| p.doc_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownDocuments(unknown));
    }
    let unassigned: Vec<String> = gts
        .iter()
        .filter(|d| manifest.split_of(&d.doc_id).is_none())
        .map(|d| d.doc_id.clone())
        .collect();
    if !unassigned.is_empty() {
        return Err(EvalError::Unassigned(unassigned));
    }
    let keep = |id: &str| split.is_none() || manifest.split_of(id) == split;
    let gts: Vec<DocumentAnnotation> = gts.iter().filter(|d| keep(&d.doc_id)).cloned().collect();
    let preds: Vec<DocumentAnnotation> = preds.iter().filter(|d| keep(&d.doc_id)).cloned().collect();
    evaluate(&preds, &gts)
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl EvalReport {
    pub fn combined(&self) -> &CollectionReport {
        self.collections.last().expect("report always has a Combined row")
    }

    pub fn collection(&self, name: &str) -> Option<&CollectionReport> {
        self.collections.iter().find(|c| c.name == name)
    }

    /// AP table: one row per collection, columns AP50 / AP75 / AP.
    pub fn render_ap_table(&self) -> String {
        let mut out = format!("{:<12}{:>8}{:>8}{:>8}\n", "", "AP50", "AP75", "AP");
        for c in &self.collections {
            let cells = match c.ap {
                Some(ap) => [pct(ap.ap50), pct(ap.ap75), pct(ap.ap_mean)],
                None => ["-".to_string(), "-".to_string(), "-".to_string()],
            };
            let _ = writeln!(out, "{:<12}{:>8}{:>8}{:>8}", c.name, cells[0], cells[1], cells[2]);
        }
        out
    }

    /// Class table: `IoU/Acc` per class; classes absent from a collection's
    /// ground truth show `-`.
    pub fn render_class_table(&self) -> String {
        let mut out = format!("{:<12}", "");
        for class in RegionClass::METRIC_ORDER {
            let _ = write!(out, "{:>14}", class.abbreviation());
        }
        out.push('\n');
        for c in &self.collections {
            let _ = write!(out, "{:<12}", c.name);
            for class in RegionClass::METRIC_ORDER {
                let cell = match c.class(class) {
                    Some(m) => format!("{}/{}", pct(m.iou), pct(m.acc)),
                    None => "-".to_string(),
                };
                let _ = write!(out, "{cell:>14}");
            }
            out.push('\n');
        }
        out
    }

    pub fn render(&self) -> String {
        format!(
            "Average IoU / per-pixel accuracy\n{}\nAverage precision\n{}",
            self.render_class_table(),
            self.render_ap_table()
        )
    }
}
