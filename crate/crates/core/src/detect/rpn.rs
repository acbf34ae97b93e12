//! Turning per-anchor RPN outputs into a ranked proposal list.

use super::anchors::decode_box_deltas;
use super::{DetectError, Result};
use crate::geometry::{box_iou, descending_order, BBox};

/// Per-anchor objectness probabilities and raw box deltas.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RpnOutput {
    pub objectness: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    /// Anchors with objectness below this are dropped before NMS.
    pub objectness_floor: f64,
    pub nms_threshold: f64,
    pub max_proposals: usize,
    /// Only the highest-scoring anchors enter NMS; `None` keeps all.
    pub pre_nms_limit: Option<usize>,
}

impl ProposalConfig {
    pub fn training() -> Self {
        ProposalConfig {
            objectness_floor: 0.0,
            nms_threshold: 0.7,
            max_proposals: 512,
            pre_nms_limit: Some(6000),
        }
    }

    pub fn inference() -> Self {
        ProposalConfig {
            max_proposals: 1000,
            ..ProposalConfig::training()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    /// Index of the anchor the proposal was decoded from.
    pub anchor: usize,
}

/// Decode, clip to `image_size`, drop below the objectness floor, NMS, and
/// truncate to `max_proposals`. Output is in descending score order.
pub fn rpn_propose(
    output: &RpnOutput,
    anchors: &[BBox],
    image_size: Option<(f64, f64)>,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if output.objectness.len() != anchors.len() {
        return Err(DetectError::LengthMismatch(output.objectness.len(), anchors.len()));
    }
    if output.deltas.len() != anchors.len() {
        return Err(DetectError::LengthMismatch(output.deltas.len(), anchors.len()));
    }
    let mut order: Vec<usize> = descending_order(&output.objectness)
        .into_iter()
        .filter(|&i| output.objectness[i] >= cfg.objectness_floor)
        .collect();
    if let Some(limit) = cfg.pre_nms_limit {
        order.truncate(limit);
    }
    let mut candidates = Vec::with_capacity(order.len());
    for i in order {
        let mut b = decode_box_deltas(&anchors[i], output.deltas[i])?;
        if let Some((w, h)) = image_size {
            b = b.clip(w, h);
        }
        candidates.push(Proposal {
            bbox: b,
            score: output.objectness[i],
            anchor: i,
        });
    }
    // Greedy NMS stopped once enough items are kept; identical to full NMS
    // followed by truncation because kept items never depend on later ones.
    let mut kept: Vec<Proposal> = Vec::new();
    for cand in candidates {
        if kept.len() >= cfg.max_proposals {
            break;
        }
        if kept
            .iter()
            .all(|k| box_iou(&k.bbox, &cand.bbox) <= cfg.nms_threshold)
        {
            kept.push(cand);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::nms;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(floor: f64, max: usize) -> ProposalConfig {
        ProposalConfig {
            objectness_floor: floor,
            nms_threshold: 0.5,
            max_proposals: max,
            pre_nms_limit: None,
        }
    }

    #[test]
    fn nothing_above_floor() {
        let anchors = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 4];
        let out = RpnOutput {
            objectness: vec![0.0; 4],
            deltas: vec![[0.0; 4]; 4],
        };
        assert!(rpn_propose(&out, &anchors, None, &cfg(0.5, 10)).unwrap().is_empty());
    }

    #[test]
    fn single_anchor_above_floor() {
        let anchors = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 40.0)];
        let out = RpnOutput {
            objectness: vec![0.1, 0.9],
            deltas: vec![[0.0; 4], [0.1, 0.0, 2f64.ln(), 0.0]],
        };
        let p = rpn_propose(&out, &anchors, None, &cfg(0.5, 10)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].anchor, 1);
        assert!((p[0].bbox.width() - 20.0).abs() < 1e-9);
        assert!((p[0].bbox.center().0 - 26.0).abs() < 1e-9);
    }

    #[test]
    fn misaligned_output_rejected() {
        let anchors = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let out = RpnOutput::default();
        assert!(rpn_propose(&out, &anchors, None, &cfg(0.0, 10)).is_err());
    }

    #[test]
    fn matches_decode_filter_nms_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = 50;
            let anchors: Vec<BBox> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..80.0);
                    let y = rng.gen_range(0.0..80.0);
                    BBox::new(x, y, x + rng.gen_range(4.0..40.0), y + rng.gen_range(4.0..40.0))
                })
                .collect();
            let out = RpnOutput {
                objectness: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                deltas: (0..n)
                    .map(|_| std::array::from_fn(|_| rng.gen_range(-0.3..0.3)))
                    .collect(),
            };
            let floor = rng.gen_range(0.0..0.6);
            let max = rng.gen_range(1..30);
            let got = rpn_propose(&out, &anchors, None, &cfg(floor, max)).unwrap();

            let decoded: Vec<BBox> = anchors
                .iter()
                .zip(&out.deltas)
                .map(|(a, &d)| decode_box_deltas(a, d).unwrap())
                .collect();
            let survivors: Vec<usize> = (0..n).filter(|&i| out.objectness[i] >= floor).collect();
            let scores: Vec<f64> = survivors.iter().map(|&i| out.objectness[i]).collect();
            let boxes: Vec<BBox> = survivors.iter().map(|&i| decoded[i]).collect();
            let mut expected: Vec<usize> = nms(&scores, &boxes, 0.5, box_iou)
                .into_iter()
                .map(|k| survivors[k])
                .collect();
            expected.truncate(max);
            assert_eq!(got.iter().map(|p| p.anchor).collect::<Vec<_>>(), expected);
            assert!(got.len() <= max);
        }
    }
}
