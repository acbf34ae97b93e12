//! Region-proposal anchors and the center/log-size box-delta coding.

use serde::{Deserialize, Serialize};

use super::{DetectError, Result};
use crate::geometry::BBox;

pub const PYRAMID_LEVELS: usize = 5;

/// Anchor configuration: one base size per pyramid level and three shapes.
///
/// Aspect ratios are stored as `r = width / height`; an anchor of base size
/// `s` has `w = s * sqrt(r)` and `h = s / sqrt(r)`, so its area is `s^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub scales: [f64; PYRAMID_LEVELS],
    pub aspect_ratios: [f64; 3],
    pub strides: [f64; PYRAMID_LEVELS],
}

impl Default for AnchorSpec {
    /// Base sizes 32..512 on P2..P6 with 1:1, 1:3 and 1:10 shapes laid out
    /// wide (text lines run horizontally).
    fn default() -> Self {
        AnchorSpec {
            scales: [32.0, 64.0, 128.0, 256.0, 512.0],
            aspect_ratios: [1.0, 3.0, 10.0],
            strides: [4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

impl AnchorSpec {
    /// Same shapes transposed: 1:3 and 1:10 anchors are tall.
    pub fn tall() -> Self {
        AnchorSpec {
            aspect_ratios: [1.0, 1.0 / 3.0, 1.0 / 10.0],
            ..AnchorSpec::default()
        }
    }

    /// Multiplies the base sizes by `factor`; strides and ratios are unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        AnchorSpec {
            scales: self.scales.map(|s| s * factor),
            aspect_ratios: self.aspect_ratios,
            strides: self.strides,
        }
    }

    /// `(width, height)` of the anchor at `level` with ratio index `ratio`.
    pub fn anchor_shape(&self, level: usize, ratio: usize) -> (f64, f64) {
        let s = self.scales[level];
        let r = self.aspect_ratios[ratio].sqrt();
        (s * r, s / r)
    }

    /// Ratio labels in `short:long` form, e.g. `"1:3"`.
    pub fn ratio_labels(&self) -> [String; 3] {
        self.aspect_ratios.map(|r| {
            let long = if r >= 1.0 { r } else { 1.0 / r };
            format!("1:{}", long.round() as u64)
        })
    }
}

/// Anchors for every cell of every level, ordered level-major, row-major,
/// ratio-minor. Anchors are centered on the cell centers mapped through the
/// level stride.
pub fn generate_anchors(pyramid_dims: &[(usize, usize)], spec: &AnchorSpec) -> Result<Vec<BBox>> {
    if pyramid_dims.len() != PYRAMID_LEVELS {
        return Err(DetectError::LevelCount {
            expected: PYRAMID_LEVELS,
            got: pyramid_dims.len(),
        });
    }
    let total: usize = pyramid_dims.iter().map(|(h, w)| h * w * 3).sum();
    let mut anchors = Vec::with_capacity(total);
    for (level, &(h, w)) in pyramid_dims.iter().enumerate() {
        let stride = spec.strides[level];
        let shapes: Vec<(f64, f64)> = (0..3).map(|r| spec.anchor_shape(level, r)).collect();
        for row in 0..h {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..w {
                let cx = (col as f64 + 0.5) * stride;
                for &(aw, ah) in &shapes {
                    anchors.push(BBox::from_center(cx, cy, aw, ah));
                }
            }
        }
    }
    Ok(anchors)
}

/// `(tx, ty, tw, th)` taking `anchor` to `target`.
pub fn encode_box_deltas(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(DetectError::DegenerateBox(*anchor));
    }
    if target.width() <= 0.0 || target.height() <= 0.0 {
        return Err(DetectError::DegenerateBox(*target));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok([
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ])
}

/// Applies `(tx, ty, tw, th)` to `anchor`:
/// `cx' = cx + tx*w`, `cy' = cy + ty*h`, `w' = w*exp(tw)`, `h' = h*exp(th)`.
pub fn decode_box_deltas(anchor: &BBox, deltas: [f64; 4]) -> Result<BBox> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(DetectError::NonFiniteDeltas(deltas));
    }
    let (w, h) = (anchor.width(), anchor.height());
    let (cx, cy) = anchor.center();
    let b = BBox::from_center(
        cx + deltas[0] * w,
        cy + deltas[1] * h,
        w * deltas[2].exp(),
        h * deltas[3].exp(),
    );
    if !b.is_finite() {
        return Err(DetectError::NonFiniteDeltas(deltas));
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SMALL_PYRAMID: [(usize, usize); 5] = [(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)];

    #[test]
    fn counts() {
        let spec = AnchorSpec::default();
        let one = generate_anchors(&[(2, 2), (0, 0), (0, 0), (0, 0), (0, 0)], &spec).unwrap();
        assert_eq!(one.len(), 12);
        let all = generate_anchors(&SMALL_PYRAMID, &spec).unwrap();
        assert_eq!(all.len(), 192 + 48 + 12 + 3 + 3);
        assert!(matches!(
            generate_anchors(&[(1, 1)], &spec),
            Err(DetectError::LevelCount { .. })
        ));
    }

    #[test]
    fn every_anchor_has_scale_squared_area_and_its_ratio() {
        for spec in [AnchorSpec::default(), AnchorSpec::tall()] {
            let anchors = generate_anchors(&SMALL_PYRAMID, &spec).unwrap();
            let mut i = 0;
            for (level, &(h, w)) in SMALL_PYRAMID.iter().enumerate() {
                for _ in 0..h * w {
                    for r in 0..3 {
                        let a = anchors[i];
                        let s2 = spec.scales[level].powi(2);
                        assert!((a.area() - s2).abs() / s2 < 1e-6);
                        let ratio = a.width() / a.height();
                        assert!((ratio - spec.aspect_ratios[r]).abs() / spec.aspect_ratios[r] < 1e-9);
                        i += 1;
                    }
                }
            }
            assert_eq!(spec.ratio_labels(), ["1:1", "1:3", "1:10"]);
        }
    }

    #[test]
    fn one_to_three_at_scale_64() {
        let tall = AnchorSpec::tall();
        let (w, h) = tall.anchor_shape(1, 1);
        assert!((w - 64.0 / 3f64.sqrt()).abs() < 1e-9);
        assert!((h - 64.0 * 3f64.sqrt()).abs() < 1e-9);
        assert!((w * h - 4096.0).abs() / 4096.0 < 1e-6);
        // default layout is the transpose
        let (w, h) = AnchorSpec::default().anchor_shape(1, 1);
        assert!((w - 64.0 * 3f64.sqrt()).abs() < 1e-9);
        assert!((h - 64.0 / 3f64.sqrt()).abs() < 1e-9);
        // 1:10 at 64 is a long thin text-line shape
        let (w, h) = AnchorSpec::default().anchor_shape(1, 2);
        assert!((w - 202.386).abs() < 1e-3 && (h - 20.239).abs() < 1e-3);
    }

    #[test]
    fn anchors_centered_on_cells() {
        let spec = AnchorSpec::default();
        let a = generate_anchors(&SMALL_PYRAMID, &spec).unwrap();
        assert_eq!(a[0].center(), (2.0, 2.0));
        // row 0, col 1 of level 0
        assert_eq!(a[3].center(), (6.0, 2.0));
        // first anchor of level 1
        assert_eq!(a[192].center(), (4.0, 4.0));
    }

    #[test]
    fn zero_deltas_are_identity() {
        let a = BBox::new(3.0, 4.0, 13.0, 24.0);
        let b = decode_box_deltas(&a, [0.0; 4]).unwrap();
        assert!((b.x1 - a.x1).abs() < 1e-12 && (b.y2 - a.y2).abs() < 1e-12);
    }

    #[test]
    fn log_width_delta_doubles_width() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = decode_box_deltas(&a, [0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
        assert!((b.width() - 20.0).abs() < 1e-12);
        assert!((b.height() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_deltas_rejected() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(decode_box_deltas(&a, [f64::NAN, 0.0, 0.0, 0.0]).is_err());
        assert!(decode_box_deltas(&a, [0.0, 0.0, 1e6, 0.0]).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let x = rng.gen_range(0.0..500.0);
            let y = rng.gen_range(0.0..500.0);
            let a = BBox::new(x, y, x + rng.gen_range(1.0..300.0), y + rng.gen_range(1.0..300.0));
            let d = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let back = encode_box_deltas(&a, &decode_box_deltas(&a, d).unwrap()).unwrap();
            for k in 0..4 {
                assert!((back[k] - d[k]).abs() < 1e-6, "{d:?} vs {back:?}");
            }
        }
    }
}
