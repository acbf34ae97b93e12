//! Pixel-mask and box geometry kernels.
//!
//! Conventions: pixel `(row, col)` covers `[col, col+1) x [row, row+1)` and has
//! its center at `(col + 0.5, row + 0.5)`. Boxes are `(x1, y1, x2, y2)` in
//! continuous pixel-edge coordinates.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("dimensions must be >= 1, got {0}x{1}")]
    EmptyDimensions(usize, usize),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        Err(GeometryError::EmptyDimensions(height, width))
    } else {
        Ok(())
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)`, with `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, reordering coordinates so the invariant holds.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }
}

/// Standard intersection-over-union on box areas. Zero when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        check_dims(height, width)?;
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        assert_eq!(bits.len(), height * width, "bit count must equal height*width");
        Ok(BinaryMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            Err(GeometryError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ))
        } else {
            Ok(())
        }
    }
}

/// Grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        check_dims(height, width)?;
        Ok(SoftMask {
            height,
            width,
            values: vec![value.clamp(0.0, 1.0); height * width],
        })
    }

    /// Wraps values, clamping them into `[0, 1]`.
    pub fn from_values(height: usize, width: usize, mut values: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        assert_eq!(values.len(), height * width, "value count must equal height*width");
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(SoftMask { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

/// Rasterizes a closed polygon: a pixel is set iff its center lies inside
/// under the even-odd rule.
pub fn rasterize_polygon(vertices: &[[f64; 2]], height: usize, width: usize) -> Result<BinaryMask> {
    if vertices.len() < 3 {
        return Err(GeometryError::TooFewVertices(vertices.len()));
    }
    let mut mask = BinaryMask::new(height, width)?;
    let n = vertices.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vertices {
        y_lo = y_lo.min(v[1]);
        y_hi = y_hi.max(v[1]);
    }
    let row_start = (y_lo - 0.5).ceil().max(0.0) as usize;
    let row_end = ((y_hi - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    for row in row_start..row_end {
        let yc = row as f64 + 0.5;
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let [xi, yi] = vertices[i];
            let [xj, yj] = vertices[j];
            if (yi > yc) != (yj > yc) {
                crossings.push((xj - xi) * (yc - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        // A center is inside iff an odd number of crossings lie strictly to its right.
        let mut k = 0;
        let base = row * width;
        for col in 0..width {
            let xc = col as f64 + 0.5;
            while k < crossings.len() && crossings[k] <= xc {
                k += 1;
            }
            if (crossings.len() - k) % 2 == 1 {
                mask.bits[base + col] = true;
            }
        }
    }
    Ok(mask)
}

/// `|a ∩ b| / |a ∪ b|`, defined as 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order; equal scores are resolved
/// by lower original index. An item is discarded when its IoU with an
/// already-kept item is strictly greater than `iou_threshold`.
pub fn nms<T>(
    scores: &[f64],
    items: &[T],
    iou_threshold: f64,
    iou_fn: impl Fn(&T, &T) -> f64,
) -> Vec<usize> {
    assert_eq!(scores.len(), items.len(), "one score per item");
    let order = descending_order(scores);
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept
            .iter()
            .all(|&k| iou_fn(&items[k], &items[idx]) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}

/// Indices sorted by descending score, ties broken by lower index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Source coordinate for output index `dst` under the align-corners-false
/// convention, clamped at the low edge.
fn source_coord(dst: usize, scale: f64) -> f64 {
    ((dst as f64 + 0.5) * scale - 0.5).max(0.0)
}

fn lerp_indices(src: f64, len: usize) -> (usize, usize, f32) {
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let t = (src - i0 as f64).clamp(0.0, 1.0) as f32;
    (i0, i1, t)
}

/// Bilinear resize with sample positions `(i + 0.5) * in/out - 0.5`.
pub fn resize_bilinear(m: &SoftMask, new_height: usize, new_width: usize) -> Result<SoftMask> {
    check_dims(new_height, new_width)?;
    let sy = m.height as f64 / new_height as f64;
    let sx = m.width as f64 / new_width as f64;
    let cols: Vec<(usize, usize, f32)> = (0..new_width)
        .map(|c| lerp_indices(source_coord(c, sx), m.width))
        .collect();
    let mut values = Vec::with_capacity(new_height * new_width);
    for r in 0..new_height {
        let (r0, r1, ty) = lerp_indices(source_coord(r, sy), m.height);
        for &(c0, c1, tx) in &cols {
            let top = m.get(r0, c0) * (1.0 - tx) + m.get(r0, c1) * tx;
            let bottom = m.get(r1, c0) * (1.0 - tx) + m.get(r1, c1) * tx;
            values.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    Ok(SoftMask {
        height: new_height,
        width: new_width,
        values,
    })
}

/// Sets a bit iff the value is `>= threshold`.
pub fn binarize(m: &SoftMask, threshold: f32) -> BinaryMask {
    BinaryMask {
        height: m.height,
        width: m.width,
        bits: m.values.iter().map(|&v| v >= threshold).collect(),
    }
}

/// Tight box around set pixels in pixel-edge coordinates; `None` when empty.
pub fn mask_to_box(m: &BinaryMask) -> Option<BBox> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for r in 0..m.height {
        let row = &m.bits[r * m.width..(r + 1) * m.width];
        if let Some(first) = row.iter().position(|&b| b) {
            let last = row.iter().rposition(|&b| b).unwrap();
            any = true;
            r0 = r0.min(r);
            r1 = r;
            c0 = c0.min(first);
            c1 = c1.max(last);
        }
    }
    any.then(|| BBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64))
}

/// Samples `field` over `roi` onto an `out_h x out_w` grid (bilinear, sample
/// points at bin centers). Samples outside the field read as 0.
pub fn crop_and_resize(field: &SoftMask, roi: &BBox, out_h: usize, out_w: usize) -> Result<SoftMask> {
    check_dims(out_h, out_w)?;
    let bin_w = roi.width() / out_w as f64;
    let bin_h = roi.height() / out_h as f64;
    let mut values = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = roi.y1 + (i as f64 + 0.5) * bin_h - 0.5;
        for j in 0..out_w {
            let x = roi.x1 + (j as f64 + 0.5) * bin_w - 0.5;
            values.push(sample_zero_padded(field, y, x));
        }
    }
    SoftMask::from_values(out_h, out_w, values)
}

/// Bilinear read at index-space coordinates `(y, x)`; positions beyond half a
/// pixel outside the grid read as 0, positions inside the border half-pixel
/// clamp to the edge.
fn sample_zero_padded(field: &SoftMask, y: f64, x: f64) -> f32 {
    let (h, w) = (field.height as f64, field.width as f64);
    if y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5 {
        return 0.0;
    }
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (r0, r1, ty) = lerp_indices(y, field.height);
    let (c0, c1, tx) = lerp_indices(x, field.width);
    let top = field.get(r0, c0) * (1.0 - tx) + field.get(r0, c1) * tx;
    let bottom = field.get(r1, c0) * (1.0 - tx) + field.get(r1, c1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Inverse of [`crop_and_resize`]: spreads a box-relative mask over an
/// `height x width` canvas. Canvas pixels whose centers fall outside `roi`
/// stay 0.
pub fn paste_into(mask: &SoftMask, roi: &BBox, height: usize, width: usize) -> Result<SoftMask> {
    check_dims(height, width)?;
    let mut values = vec![0.0f32; height * width];
    if roi.width() <= 0.0 || roi.height() <= 0.0 {
        return SoftMask::from_values(height, width, values);
    }
    let sx = mask.width as f64 / roi.width();
    let sy = mask.height as f64 / roi.height();
    let r_start = (roi.y1 - 0.5).ceil().max(0.0) as usize;
    let r_end = ((roi.y2 - 0.5).ceil().max(0.0) as usize).min(height);
    let c_start = (roi.x1 - 0.5).ceil().max(0.0) as usize;
    let c_end = ((roi.x2 - 0.5).ceil().max(0.0) as usize).min(width);
    for r in r_start..r_end {
        let v = ((r as f64 + 0.5 - roi.y1) * sy - 0.5).clamp(0.0, mask.height as f64 - 1.0);
        let (m0, m1, ty) = lerp_indices(v, mask.height);
        for c in c_start..c_end {
            let u = ((c as f64 + 0.5 - roi.x1) * sx - 0.5).clamp(0.0, mask.width as f64 - 1.0);
            let (n0, n1, tx) = lerp_indices(u, mask.width);
            let top = mask.get(m0, n0) * (1.0 - tx) + mask.get(m0, n1) * tx;
            let bottom = mask.get(m1, n0) * (1.0 - tx) + mask.get(m1, n1) * tx;
            values[r * width + c] = top * (1.0 - ty) + bottom * ty;
        }
    }
    SoftMask::from_values(height, width, values)
}

/// Pixel-edge outline of a mask as one closed vertex list.
///
/// Every boundary ring (outer borders and inner holes of all components) is
/// traced along pixel edges; rings are chained through axis-aligned bridges
/// that are walked out and back, so even-odd rasterization of the result
/// reproduces `mask` exactly. `None` for an empty mask.
pub fn mask_to_polygon(mask: &BinaryMask) -> Option<Vec<[f64; 2]>> {
    let (h, w) = (mask.height, mask.width);
    let set = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.get(r as usize, c as usize);
    // directed edges, pixel interior on the right (y down)
    let mut edges: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !set(ri - 1, ci) {
                edges.push(((c, r), (c + 1, r)));
            }
            if !set(ri, ci + 1) {
                edges.push(((c + 1, r), (c + 1, r + 1)));
            }
            if !set(ri + 1, ci) {
                edges.push(((c + 1, r + 1), (c, r + 1)));
            }
            if !set(ri, ci - 1) {
                edges.push(((c, r + 1), (c, r)));
            }
        }
    }
    if edges.is_empty() {
        return None;
    }
    let mut outgoing: std::collections::HashMap<(usize, usize), Vec<usize>> = std::collections::HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        outgoing.entry(e.0).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let mut rings: Vec<Vec<(usize, usize)>> = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut ring = Vec::new();
        let mut e = start;
        loop {
            used[e] = true;
            ring.push(edges[e].0);
            let next = outgoing[&edges[e].1].iter().copied().find(|&i| !used[i]);
            match next {
                Some(n) => e = n,
                None => break,
            }
        }
        rings.push(simplify_ring(ring));
    }
    let anchor = rings[0][0];
    let to_f = |p: (usize, usize)| [p.0 as f64, p.1 as f64];
    let mut out: Vec<[f64; 2]> = rings[0].iter().map(|&p| to_f(p)).collect();
    for ring in &rings[1..] {
        let start = ring[0];
        let corner = (anchor.0, start.1);
        out.push(to_f(anchor));
        out.push(to_f(corner));
        out.extend(ring.iter().map(|&p| to_f(p)));
        out.push(to_f(start));
        out.push(to_f(corner));
    }
    if rings.len() > 1 {
        out.push(to_f(anchor));
    }
    Some(out)
}

/// Drops vertices in the middle of straight runs.
fn simplify_ring(ring: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let n = ring.len();
    let dir = |a: (usize, usize), b: (usize, usize)| {
        ((b.0 as isize - a.0 as isize).signum(), (b.1 as isize - a.1 as isize).signum())
    };
    let kept: Vec<(usize, usize)> = (0..n)
        .filter(|&i| {
            let prev = ring[(i + n - 1) % n];
            let next = ring[(i + 1) % n];
            dir(prev, ring[i]) != dir(ring[i], next)
        })
        .map(|i| ring[i])
        .collect();
    if kept.len() >= 3 {
        kept
    } else {
        ring
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pnpoly(vertices: &[[f64; 2]], x: f64, y: f64) -> bool {
        let mut inside = false;
        let mut j = vertices.len() - 1;
        for i in 0..vertices.len() {
            let [xi, yi] = vertices[i];
            let [xj, yj] = vertices[j];
            if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p)).unwrap()
    }

    #[test]
    fn rasterize_small_square() {
        let m = rasterize_polygon(&[[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]], 4, 4).unwrap();
        assert_eq!(m.count(), 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!(m.get(r, c));
        }
    }

    #[test]
    fn rasterize_triangle_matches_point_in_polygon() {
        let tri = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let m = rasterize_polygon(&tri, 8, 8).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c), pnpoly(&tri, c as f64 + 0.5, r as f64 + 0.5), "({r},{c})");
            }
        }
        assert_eq!(m.count(), 6);
    }

    #[test]
    fn rasterize_random_polygons_match_point_in_polygon() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(3..9);
            let verts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(-3.0..23.0), rng.gen_range(-3.0..19.0)])
                .collect();
            let m = rasterize_polygon(&verts, 16, 20).unwrap();
            for r in 0..16 {
                for c in 0..20 {
                    assert_eq!(m.get(r, c), pnpoly(&verts, c as f64 + 0.5, r as f64 + 0.5));
                }
            }
        }
    }

    #[test]
    fn rasterize_full_image_and_errors() {
        let m = rasterize_polygon(&[[0.0, 0.0], [5.0, 0.0], [5.0, 3.0], [0.0, 3.0]], 3, 5).unwrap();
        assert_eq!(m.count(), 15);
        assert_eq!(
            rasterize_polygon(&[[0.0, 0.0], [1.0, 1.0]], 3, 3),
            Err(GeometryError::TooFewVertices(2))
        );
    }

    #[test]
    fn rasterized_area_converges_with_scale() {
        let (x1, y1, x2, y2) = (1.3, 0.7, 4.9, 3.2);
        let area = (x2 - x1) * (y2 - y1);
        let perimeter = 2.0 * ((x2 - x1) + (y2 - y1));
        for s in [1.0, 4.0, 16.0] {
            let poly = [[x1 * s, y1 * s], [x2 * s, y1 * s], [x2 * s, y2 * s], [x1 * s, y2 * s]];
            let n = (6.0 * s) as usize;
            let m = rasterize_polygon(&poly, n, n).unwrap();
            let est = m.count() as f64 / (s * s);
            assert!((est - area).abs() <= 2.0 * perimeter / s, "s={s} est={est}");
        }
    }

    #[test]
    fn mask_iou_cases() {
        let a = BinaryMask::from_fn(6, 4, |r, _| r <= 3).unwrap();
        let b = BinaryMask::from_fn(6, 4, |r, _| r >= 2).unwrap();
        assert!((mask_iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = BinaryMask::from_fn(6, 4, |r, _| r >= 4).unwrap();
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let empty = BinaryMask::new(6, 4).unwrap();
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);
        assert!(matches!(
            mask_iou(&a, &BinaryMask::new(3, 3).unwrap()),
            Err(GeometryError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn mask_iou_equals_pixel_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_mask(&mut rng, 9, 7, 0.4);
            let b = random_mask(&mut rng, 9, 7, 0.4);
            let mut inter = 0;
            let mut uni = 0;
            for r in 0..9 {
                for c in 0..7 {
                    if a.get(r, c) && b.get(r, c) {
                        inter += 1;
                    }
                    if a.get(r, c) || b.get(r, c) {
                        uni += 1;
                    }
                }
            }
            let expected = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
            assert_eq!(mask_iou(&a, &b).unwrap(), expected);
            assert_eq!(mask_iou(&b, &a).unwrap(), expected);
        }
    }

    #[test]
    fn box_iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((box_iou(&a, &BBox::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
        let degenerate = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(box_iou(&degenerate, &degenerate), 0.0);
    }

    #[test]
    fn nms_basic_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[0.3], &[b], 0.5, box_iou), vec![0]);
        assert_eq!(nms(&[0.8, 0.9], &[b, b], 0.5, box_iou), vec![1]);
        assert!(nms::<BBox>(&[], &[], 0.5, box_iou).is_empty());
        // equal scores: lower index wins
        assert_eq!(nms(&[0.5, 0.5], &[b, b], 0.5, box_iou), vec![0]);
    }

    #[test]
    fn kept_count_is_not_monotone_in_threshold() {
        // Raising the threshold keeps B, which then suppresses C and D.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(2.5, 0.0, 12.5, 10.0);
        let c = BBox::new(2.5, 2.0, 12.5, 12.0);
        let d = BBox::new(4.5, 0.0, 14.5, 10.0);
        let scores = [0.9, 0.8, 0.7, 0.6];
        let items = [a, b, c, d];
        assert!(box_iou(&a, &b) > 0.55 && box_iou(&a, &b) <= 0.65);
        let low = nms(&scores, &items, 0.55, box_iou);
        let high = nms(&scores, &items, 0.65, box_iou);
        assert!(low.len() > high.len(), "{low:?} vs {high:?}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..35).map(|_| rng.gen()).collect();
        let m = SoftMask::from_values(5, 7, vals).unwrap();
        assert_eq!(resize_bilinear(&m, 5, 7).unwrap(), m);
        let c = SoftMask::filled(3, 4, 0.7).unwrap();
        for (h, w) in [(1, 1), (6, 2), (13, 17)] {
            let r = resize_bilinear(&c, h, w).unwrap();
            assert!(r.values().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
    }

    #[test]
    fn resize_two_by_two_to_two_by_four() {
        let m = SoftMask::from_values(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&m, 2, 4).unwrap();
        // sample x = (j + 0.5) * 0.5 - 0.5 clamped: 0, 0.25, 0.75, 1
        let expected = [0.0, 0.25, 0.75, 1.0];
        for row in 0..2 {
            for (j, e) in expected.iter().enumerate() {
                assert!((r.get(row, j) - e).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn binarize_is_inclusive() {
        let m = SoftMask::from_values(1, 3, vec![0.39, 0.40, 0.41]).unwrap();
        assert_eq!(binarize(&m, 0.4).bits(), &[false, true, true]);
        assert!(binarize(&SoftMask::filled(4, 4, 0.0).unwrap(), 0.4).is_empty());
    }

    #[test]
    fn binarize_matches_elementwise_loop_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let m = SoftMask::from_values(8, 8, vals.clone()).unwrap();
        let b = binarize(&m, 0.4);
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(b.bits()[i], *v >= 0.4);
        }
        assert_eq!(binarize(&b.to_soft(), 0.4), b);
    }

    #[test]
    fn mask_to_box_cases() {
        let mut m = BinaryMask::new(8, 8).unwrap();
        assert_eq!(mask_to_box(&m), None);
        m.set(3, 5, true);
        assert_eq!(mask_to_box(&m), Some(BBox::new(5.0, 3.0, 6.0, 4.0)));
        let full = BinaryMask::from_fn(4, 6, |_, _| true).unwrap();
        assert_eq!(mask_to_box(&full), Some(BBox::new(0.0, 0.0, 6.0, 4.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let m = random_mask(&mut rng, 10, 12, 0.05);
            let mut b: Option<(usize, usize, usize, usize)> = None;
            for r in 0..10 {
                for c in 0..12 {
                    if m.get(r, c) {
                        b = Some(match b {
                            None => (c, r, c, r),
                            Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                        });
                    }
                }
            }
            let expected = b.map(|(x0, y0, x1, y1)| {
                BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
            });
            assert_eq!(mask_to_box(&m), expected);
        }
    }

    #[test]
    fn crop_and_paste_full_box() {
        let field = SoftMask::filled(8, 8, 1.0).unwrap();
        let roi = BBox::new(0.0, 0.0, 8.0, 8.0);
        let crop = crop_and_resize(&field, &roi, 28, 28).unwrap();
        assert!(crop.values().iter().all(|&v| v == 1.0));
        let pasted = paste_into(&crop, &roi, 8, 8).unwrap();
        assert!(pasted.values().iter().all(|&v| v == 1.0));
        let partial = paste_into(&crop, &BBox::new(2.0, 2.0, 4.0, 6.0), 8, 8).unwrap();
        assert_eq!(binarize(&partial, 0.5).count(), 8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn boxes() -> impl Strategy<Value = Vec<(f64, BBox)>> {
            prop::collection::vec(
                (0.0f64..1.0, 0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0)
                    .prop_map(|(s, x, y, w, h)| (s, BBox::new(x, y, x + w, y + h))),
                0..25,
            )
        }

        proptest! {
            #[test]
            fn nms_is_idempotent(items in boxes(), t in 0.0f64..1.0) {
                let scores: Vec<f64> = items.iter().map(|i| i.0).collect();
                let bxs: Vec<BBox> = items.iter().map(|i| i.1).collect();
                let kept = nms(&scores, &bxs, t, box_iou);
                let s2: Vec<f64> = kept.iter().map(|&k| scores[k]).collect();
                let b2: Vec<BBox> = kept.iter().map(|&k| bxs[k]).collect();
                let again = nms(&s2, &b2, t, box_iou);
                prop_assert_eq!(again, (0..kept.len()).collect::<Vec<_>>());
            }

            #[test]
            fn nms_kept_items_pairwise_below_threshold(items in boxes(), t in 0.0f64..1.0) {
                let scores: Vec<f64> = items.iter().map(|i| i.0).collect();
                let bxs: Vec<BBox> = items.iter().map(|i| i.1).collect();
                let kept = nms(&scores, &bxs, t, box_iou);
                for (a, &i) in kept.iter().enumerate() {
                    for &j in &kept[a + 1..] {
                        prop_assert!(box_iou(&bxs[i], &bxs[j]) <= t);
                    }
                }
                prop_assert_eq!(nms(&scores, &bxs, 1.0, box_iou).len(), bxs.len());
            }

            #[test]
            fn resize_stays_in_unit_interval(vals in prop::collection::vec(0.0f32..=1.0, 12), h in 1usize..20, w in 1usize..20) {
                let m = SoftMask::from_values(3, 4, vals).unwrap();
                let r = resize_bilinear(&m, h, w).unwrap();
                prop_assert!(r.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn traced_polygon_rasterizes_back_to_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let h = rng.gen_range(1..14);
            let w = rng.gen_range(1..14);
            let density = rng.gen_range(0.1..0.9);
            let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density)).unwrap();
            match mask_to_polygon(&m) {
                None => assert!(m.is_empty()),
                Some(poly) => assert_eq!(rasterize_polygon(&poly, h, w).unwrap(), m),
            }
        }
        let square = BinaryMask::from_fn(6, 6, |r, c| (1..4).contains(&r) && (2..5).contains(&c)).unwrap();
        assert_eq!(mask_to_polygon(&square).unwrap().len(), 4);
    }
}
