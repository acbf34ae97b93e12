//! Procedural manuscript-like pages with instance-level ground truth.
//!
//! A page is a toned leaf carrying wavy text-line bands filled with abstract
//! glyph marks, binding holes punched through the lines, stains and optional
//! stamps, decorations, pictures and ruling lines. Every region polygon is
//! also the exact footprint used to paint it. Output depends only on the
//! config and the seed.

use std::f64::consts::TAU;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    Collection, CorpusError, CorpusManifest, DocumentAnnotation, Polygon, RegionClass, RegionInstance,
    ShapeKind, Split,
};
use crate::geometry::{rasterize_polygon, BinaryMask};
use crate::preprocess::RgbImage;

pub const MIN_DIMENSION: u32 = 256;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(
        "page {page}: {lines} lines need at least {needed:.0}px of text height but only {available:.0}px fit; \
         lower lines_per_page or line_spacing, or raise the image height"
    )]
    Infeasible {
        page: usize,
        lines: usize,
        needed: f64,
        available: f64,
    },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stacking {
    Horizontal,
    Vertical,
}

/// Generator parameters. Ranges are inclusive `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub pages_per_image: usize,
    pub stacking: Stacking,
    pub lines_per_page: [usize; 2],
    /// Peak vertical displacement of a line's centerline, in pixels.
    pub waviness: f64,
    /// Baseline-to-baseline distance, in pixels.
    pub line_spacing: [f64; 2],
    pub holes_per_page: [usize; 2],
    pub hole_radius: [f64; 2],
    pub degradations_per_page: [usize; 2],
    pub library_marker: bool,
    pub decorator: bool,
    pub picture: bool,
    pub boundary_line: bool,
    pub width: u32,
    pub height: u32,
    /// Master seed used when the caller does not supply one.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pages_per_image: 1,
            stacking: Stacking::Horizontal,
            lines_per_page: [6, 9],
            waviness: 3.0,
            line_spacing: [24.0, 34.0],
            holes_per_page: [0, 2],
            hole_radius: [6.0, 11.0],
            degradations_per_page: [0, 2],
            library_marker: false,
            decorator: false,
            picture: false,
            boundary_line: false,
            width: 1024,
            height: 384,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(1..=2).contains(&self.pages_per_image) {
            return bad(format!("pages_per_image must be 1 or 2, got {}", self.pages_per_image));
        }
        if self.width < MIN_DIMENSION || self.height < MIN_DIMENSION {
            return bad(format!(
                "image must be at least {MIN_DIMENSION}x{MIN_DIMENSION}, got {}x{}",
                self.width, self.height
            ));
        }
        for (name, r) in [
            ("lines_per_page", self.lines_per_page),
            ("holes_per_page", self.holes_per_page),
            ("degradations_per_page", self.degradations_per_page),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        for (name, r, min) in [("line_spacing", self.line_spacing, 4.0), ("hole_radius", self.hole_radius, 2.0)] {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < min {
                return bad(format!("{name} range {r:?} must satisfy {min} <= lo <= hi"));
            }
        }
        if !self.waviness.is_finite() || self.waviness < 0.0 {
            return bad(format!("waviness must be >= 0, got {}", self.waviness));
        }
        Ok(())
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_gray(self.width, self.height, &self.pixels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDocument {
    pub image: GrayImage,
    pub annotation: DocumentAnnotation,
    /// Regions emitted per class, indexed by [`RegionClass::index`].
    pub emitted: [usize; RegionClass::COUNT],
}

/// Float canvas the painters draw on.
struct Canvas {
    width: usize,
    height: usize,
    px: Vec<f32>,
}

/// A rasterized region clipped to the image, stored over its bounding box.
struct Footprint {
    row0: usize,
    col0: usize,
    mask: BinaryMask,
}

impl Footprint {
    fn of(vertices: &[[f64; 2]], width: usize, height: usize) -> Option<Footprint> {
        let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for v in vertices {
            x1 = x1.min(v[0]);
            y1 = y1.min(v[1]);
            x2 = x2.max(v[0]);
            y2 = y2.max(v[1]);
        }
        let col0 = x1.floor().max(0.0) as usize;
        let row0 = y1.floor().max(0.0) as usize;
        let col1 = (x2.ceil().max(0.0) as usize).min(width);
        let row1 = (y2.ceil().max(0.0) as usize).min(height);
        if col1 <= col0 || row1 <= row0 {
            return None;
        }
        let local: Vec<[f64; 2]> = vertices
            .iter()
            .map(|v| [v[0] - col0 as f64, v[1] - row0 as f64])
            .collect();
        let mask = rasterize_polygon(&local, row1 - row0, col1 - col0).ok()?;
        Some(Footprint { row0, col0, mask })
    }

    /// Calls `f(row, col, local_row, local_col)` for every covered pixel.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for r in 0..self.mask.height() {
            for c in 0..self.mask.width() {
                if self.mask.get(r, c) {
                    f(self.row0 + r, self.col0 + c, r, c);
                }
            }
        }
    }
}

impl Canvas {
    fn paint(&mut self, fp: &Footprint, mut shade: impl FnMut(usize, usize, f32) -> f32) {
        let w = self.width;
        let px = &mut self.px;
        fp.for_each(|r, c, lr, lc| {
            let i = r * w + c;
            px[i] = shade(lr, lc, px[i]);
        });
    }
}

struct Builder<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    canvas: Canvas,
    regions: Vec<RegionInstance>,
    emitted: [usize; RegionClass::COUNT],
}

fn range_f(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn range_u(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Rect {
    fn w(&self) -> f64 {
        self.x2 - self.x1
    }
    fn h(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Centerline and extent of one rendered text line.
struct LineBand {
    x1: f64,
    x2: f64,
    center: f64,
}

impl<'a> Builder<'a> {
    fn clamp(&self, v: [f64; 2]) -> [f64; 2] {
        [
            v[0].clamp(0.0, self.canvas.width as f64),
            v[1].clamp(0.0, self.canvas.height as f64),
        ]
    }

    /// Records a region and returns its footprint for painting.
    fn emit(&mut self, class: RegionClass, kind: ShapeKind, vertices: Vec<[f64; 2]>) -> Result<Option<Footprint>> {
        let vertices: Vec<[f64; 2]> = vertices.into_iter().map(|v| self.clamp(v)).collect();
        let fp = Footprint::of(&vertices, self.canvas.width, self.canvas.height);
        if fp.as_ref().is_none_or(|f| f.mask.is_empty()) {
            return Ok(None);
        }
        let polygon = Polygon::new(kind, vertices)?;
        self.regions.push(RegionInstance::new(class, polygon));
        self.emitted[class.index()] += 1;
        Ok(fp)
    }

    fn rect_vertices(r: Rect) -> Vec<[f64; 2]> {
        vec![[r.x1, r.y1], [r.x2, r.y1], [r.x2, r.y2], [r.x1, r.y2]]
    }

    fn page(&mut self, index: usize, area: Rect) -> Result<()> {
        let cfg = self.cfg;
        let mx = area.w() * self.rng.gen_range(0.02..0.05);
        let my = area.h() * self.rng.gen_range(0.04..0.08);
        let jitter = (area.w().min(area.h()) * 0.015).max(1.0);
        let leaf = Rect {
            x1: area.x1 + mx,
            y1: area.y1 + my,
            x2: area.x2 - mx,
            y2: area.y2 - my,
        };
        let mut corners = Self::rect_vertices(leaf);
        for c in &mut corners {
            c[0] += self.rng.gen_range(-jitter..jitter);
            c[1] += self.rng.gen_range(-jitter..jitter);
        }
        let tone = self.rng.gen_range(170.0..205.0f32);
        let grain_period = self.rng.gen_range(40.0..120.0f32);
        if let Some(fp) = self.emit(RegionClass::PageBoundary, ShapeKind::Polygon, corners)? {
            self.canvas.paint(&fp, |r, c, _| {
                tone + 8.0 * ((c as f32 / grain_period).sin() * (r as f32 / (grain_period * 0.7)).cos())
            });
        }

        let mut text = Rect {
            x1: leaf.x1 + leaf.w() * self.rng.gen_range(0.06..0.10),
            y1: leaf.y1 + leaf.h() * self.rng.gen_range(0.08..0.12),
            x2: leaf.x2 - leaf.w() * self.rng.gen_range(0.06..0.10),
            y2: leaf.y2 - leaf.h() * self.rng.gen_range(0.08..0.12),
        };
        if cfg.boundary_line {
            let thick = self.rng.gen_range(2.0..3.5);
            for x in [text.x1, text.x2 - thick] {
                let r = Rect {
                    x1: x,
                    y1: text.y1 - 2.0,
                    x2: x + thick,
                    y2: text.y2 + 2.0,
                };
                if let Some(fp) = self.emit(RegionClass::BoundaryLine, ShapeKind::Rectangle, Self::rect_vertices(r))? {
                    self.canvas.paint(&fp, |_, _, _| 45.0);
                }
            }
            text.x1 += 8.0;
            text.x2 -= 8.0;
        }
        let picture = if cfg.picture {
            let pw = text.w() * self.rng.gen_range(0.18..0.28);
            let ph = text.h() * self.rng.gen_range(0.45..0.7);
            let y1 = text.y1 + (text.h() - ph) * self.rng.gen_range(0.2..0.8);
            Some(Rect {
                x1: text.x2 - pw,
                y1,
                x2: text.x2,
                y2: y1 + ph,
            })
        } else {
            None
        };

        let lines = self.lines(index, text, picture)?;
        if let Some(p) = picture {
            let cell = self.rng.gen_range(6.0..12.0f32);
            if let Some(fp) = self.emit(RegionClass::Picture, ShapeKind::Rectangle, Self::rect_vertices(p))? {
                let h = fp.mask.height() as f32;
                self.canvas.paint(&fp, |r, c, _| {
                    let (x, y) = (c as f32, r as f32);
                    let rings = ((x - h * 0.5).hypot(y - h * 0.5) / cell).sin();
                    110.0 + 50.0 * rings
                });
            }
        }
        if cfg.library_marker {
            let s = leaf.h() * self.rng.gen_range(0.10..0.16);
            let x1 = leaf.x1 + leaf.w() * self.rng.gen_range(0.005..0.03);
            let y1 = leaf.y1 + (leaf.h() - s) * self.rng.gen_range(0.0..1.0);
            let r = Rect { x1, y1, x2: x1 + s, y2: y1 + s };
            if let Some(fp) = self.emit(RegionClass::LibraryMarker, ShapeKind::Rectangle, Self::rect_vertices(r))? {
                let (h, w) = (fp.mask.height(), fp.mask.width());
                self.canvas.paint(&fp, |r, c, _| {
                    let edge = r < 2 || c < 2 || r + 2 >= h || c + 2 >= w;
                    if edge || r == h / 2 || c == w / 2 {
                        70.0
                    } else {
                        225.0
                    }
                });
            }
        }
        if cfg.decorator {
            let s = leaf.h() * self.rng.gen_range(0.08..0.14);
            let cx = leaf.x2 - leaf.w() * 0.04;
            let cy = leaf.y1 + leaf.h() * self.rng.gen_range(0.3..0.7);
            let diamond = vec![[cx, cy - s], [cx + s * 0.6, cy], [cx, cy + s], [cx - s * 0.6, cy]];
            if let Some(fp) = self.emit(RegionClass::Decorator, ShapeKind::Polygon, diamond)? {
                self.canvas
                    .paint(&fp, |r, c, _| if (r + c) % 4 < 2 { 80.0 } else { 140.0 });
            }
        }
        for _ in 0..range_u(&mut self.rng, cfg.degradations_per_page) {
            let r = leaf.h() * self.rng.gen_range(0.04..0.12);
            let cx = self.rng.gen_range(leaf.x1 + r..leaf.x2 - r);
            let cy = self.rng.gen_range(leaf.y1 + r..leaf.y2 - r);
            let n = 11;
            let blob: Vec<[f64; 2]> = (0..n)
                .map(|k| {
                    let a = TAU * k as f64 / n as f64;
                    let rr = r * self.rng.gen_range(0.55..1.0);
                    [cx + rr * a.cos(), cy + rr * a.sin()]
                })
                .collect();
            let dim = self.rng.gen_range(0.55..0.75f32);
            if let Some(fp) = self.emit(RegionClass::PhysicalDegradation, ShapeKind::Freehand, blob)? {
                self.canvas.paint(&fp, |_, _, v| v * dim);
            }
        }
        for _ in 0..range_u(&mut self.rng, cfg.holes_per_page) {
            let radius = range_f(&mut self.rng, cfg.hole_radius);
            let (cx, cy) = match lines.len() {
                0 => (
                    self.rng.gen_range(text.x1..text.x2.max(text.x1 + 1.0)),
                    self.rng.gen_range(text.y1..text.y2.max(text.y1 + 1.0)),
                ),
                n => {
                    let l = &lines[self.rng.gen_range(0..n)];
                    (self.rng.gen_range(l.x1..l.x2.max(l.x1 + 1.0)), l.center)
                }
            };
            let n = 20;
            let circle: Vec<[f64; 2]> = (0..n)
                .map(|k| {
                    let a = TAU * k as f64 / n as f64;
                    [cx + radius * a.cos(), cy + radius * a.sin()]
                })
                .collect();
            if let Some(fp) = self.emit(RegionClass::Hole, ShapeKind::Freehand, circle)? {
                self.canvas.paint(&fp, |_, _, _| 24.0);
            }
        }
        Ok(())
    }

    fn lines(&mut self, page: usize, text: Rect, picture: Option<Rect>) -> Result<Vec<LineBand>> {
        let cfg = self.cfg;
        let n = range_u(&mut self.rng, cfg.lines_per_page);
        if n == 0 {
            return Ok(Vec::new());
        }
        let available = text.h();
        let needed = n as f64 * cfg.line_spacing[0];
        if needed > available {
            return Err(SynthError::Infeasible {
                page,
                lines: n,
                needed,
                available,
            });
        }
        let pitch = range_f(&mut self.rng, [cfg.line_spacing[0], cfg.line_spacing[1].min(available / n as f64)]);
        let y0 = text.y1 + (available - n as f64 * pitch) * self.rng.gen_range(0.0..0.5);
        let period = self.rng.gen_range(150.0..400.0);
        let phase = self.rng.gen_range(0.0..TAU);
        let mut bands = Vec::with_capacity(n);
        for i in 0..n {
            let thick = pitch * self.rng.gen_range(0.6..0.75);
            let center = y0 + (i as f64 + 0.5) * pitch;
            let amp = cfg.waviness * self.rng.gen_range(0.5..1.0);
            let x1 = text.x1 + text.w() * self.rng.gen_range(0.0..0.03);
            let mut x2 = text.x2 - text.w() * self.rng.gen_range(0.0..0.03);
            if i + 1 == n && self.rng.gen_bool(0.3) {
                x2 = x1 + (x2 - x1) * self.rng.gen_range(0.4..0.9);
            }
            if let Some(p) = picture {
                let reach = amp + thick * 0.5;
                if center + reach > p.y1 && center - reach < p.y2 {
                    x2 = x2.min(p.x1 - 6.0);
                }
            }
            if x2 - x1 < thick * 2.0 {
                continue;
            }
            let y_at = |x: f64| center + amp * (TAU * (x - text.x1) / period + phase).sin();
            let steps = ((x2 - x1) / 12.0).ceil().max(1.0) as usize;
            let xs: Vec<f64> = (0..=steps).map(|k| x1 + (x2 - x1) * k as f64 / steps as f64).collect();
            let mut outline: Vec<[f64; 2]> = xs.iter().map(|&x| [x, y_at(x) - thick * 0.5]).collect();
            outline.extend(xs.iter().rev().map(|&x| [x, y_at(x) + thick * 0.5]));

            let glyph_w = (thick * self.rng.gen_range(0.6..0.9)).max(3.0);
            let glyphs: Vec<u16> = (0..((x2 - x1) / glyph_w) as usize + 2)
                .map(|_| self.rng.gen::<u16>())
                .collect();
            if let Some(fp) = self.emit(RegionClass::CharacterLineSegment, ShapeKind::Polygon, outline)? {
                let col0 = fp.col0 as f64;
                // ink: a headline stroke plus a 3x4 bit pattern per glyph cell
                self.canvas.paint(&fp, |r, c, v| {
                    let x = col0 + c as f64 + 0.5;
                    let y = fp.row0 as f64 + r as f64 + 0.5;
                    let top = y_at(x) - thick * 0.5;
                    let fy = ((y - top) / thick).clamp(0.0, 0.999);
                    let gx = (x - x1) / glyph_w;
                    let cell = gx.floor().max(0.0) as usize;
                    let fx = gx - gx.floor();
                    if fx > 0.8 {
                        return v - 12.0;
                    }
                    let bits = glyphs[cell.min(glyphs.len() - 1)];
                    let bit = (fy * 4.0) as u16 * 3 + (fx / 0.8 * 3.0) as u16;
                    let headline = (0.15..0.3).contains(&fy);
                    if headline || bits >> bit & 1 == 1 {
                        55.0
                    } else {
                        v - 12.0
                    }
                });
            }
            bands.push(LineBand { x1, x2, center });
        }
        Ok(bands)
    }
}

/// Renders one document. Identical `(cfg, seed)` give identical output.
pub fn generate_document(cfg: &SynthConfig, seed: u64, doc_id: &str) -> Result<SynthDocument> {
    cfg.validate()?;
    let (width, height) = (cfg.width as usize, cfg.height as usize);
    let mut b = Builder {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        canvas: Canvas {
            width,
            height,
            px: vec![34.0; width * height],
        },
        regions: Vec::new(),
        emitted: [0; RegionClass::COUNT],
    };
    let (w, h) = (width as f64, height as f64);
    let areas: Vec<Rect> = match (cfg.pages_per_image, cfg.stacking) {
        (1, _) => vec![Rect { x1: 0.0, y1: 0.0, x2: w, y2: h }],
        (_, Stacking::Horizontal) => vec![
            Rect { x1: 0.0, y1: 0.0, x2: w / 2.0, y2: h },
            Rect { x1: w / 2.0, y1: 0.0, x2: w, y2: h },
        ],
        (_, Stacking::Vertical) => vec![
            Rect { x1: 0.0, y1: 0.0, x2: w, y2: h / 2.0 },
            Rect { x1: 0.0, y1: h / 2.0, x2: w, y2: h },
        ],
    };
    for (i, area) in areas.into_iter().enumerate() {
        b.page(i, area)?;
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(b.rng.next_u64());
    let pixels = b
        .canvas
        .px
        .iter()
        .map(|&v| (v + noise_rng.gen_range(-6.0..6.0f32)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(SynthDocument {
        image: GrayImage { width, height, pixels },
        annotation: DocumentAnnotation {
            doc_id: doc_id.to_string(),
            image_path: format!("images/{doc_id}.png"),
            width: cfg.width,
            height: cfg.height,
            collection: Collection::Synthetic,
            script: "synthetic".to_string(),
            regions: b.regions,
        },
        emitted: b.emitted,
    })
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub documents: Vec<SynthDocument>,
    pub manifest: CorpusManifest,
}

impl SynthCorpus {
    pub fn annotations(&self) -> Vec<DocumentAnnotation> {
        self.documents.iter().map(|d| d.annotation.clone()).collect()
    }
}

/// Train/validation/test sizes: each fraction of `n` rounded down, the
/// remainder going to train.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::Fractions(fractions));
    }
    let val = (n as f64 * fractions[1]).floor() as usize;
    let test = (n as f64 * fractions[2]).floor() as usize;
    Ok([n - val - test, val, test])
}

pub fn doc_id(index: usize) -> String {
    format!("synth-{index:04}")
}

/// Generates `n` documents with per-document seeds drawn from `seed`, the
/// first ones assigned to train, then validation, then test.
pub fn generate_corpus(cfg: &SynthConfig, n: usize, fractions: [f64; 3], seed: u64) -> Result<SynthCorpus> {
    let sizes = split_sizes(n, fractions)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.next_u64()).collect();
    let mut manifest = CorpusManifest::new();
    let mut documents = Vec::with_capacity(n);
    for (i, s) in seeds.into_iter().enumerate() {
        let id = doc_id(i);
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
        manifest.assign(id.clone(), split);
        documents.push(generate_document(cfg, s, &id)?);
    }
    Ok(SynthCorpus { documents, manifest })
}
