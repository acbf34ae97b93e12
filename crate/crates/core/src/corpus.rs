//! Annotation data model for overlapping manuscript regions, plus the corpus
//! and split-manifest file formats.
//!
//! Regions of any class may overlap each other; nothing in this module treats
//! intersection as an error. Coordinates are stored in original image space.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const ANNOTATION_FORMAT: &str = "mslayout-annotations";
pub const MANIFEST_FORMAT: &str = "mslayout-manifest";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Syntax(String),
    #[error("malformed document record #{index} (doc_id {doc_id:?}): {message}")]
    Record {
        index: usize,
        doc_id: Option<String>,
        message: String,
    },
    #[error("validation failed for doc_id {doc_id:?}: {message}")]
    Validation { doc_id: String, message: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("documents missing from manifest: {0:?}")]
    MissingSplit(Vec<String>),
    #[error("invalid polygon: {0}")]
    Polygon(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// The nine layout region types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionClass {
    #[serde(rename = "CLS")]
    CharacterLineSegment,
    #[serde(rename = "CC")]
    CharacterComponent,
    #[serde(rename = "H")]
    Hole,
    #[serde(rename = "PB")]
    PageBoundary,
    #[serde(rename = "LM")]
    LibraryMarker,
    #[serde(rename = "D")]
    Decorator,
    #[serde(rename = "P")]
    Picture,
    #[serde(rename = "PD")]
    PhysicalDegradation,
    #[serde(rename = "BL")]
    BoundaryLine,
}

impl RegionClass {
    pub const COUNT: usize = 9;

    /// All classes in region-count table order.
    pub const ALL: [RegionClass; 9] = [
        RegionClass::CharacterLineSegment,
        RegionClass::CharacterComponent,
        RegionClass::Hole,
        RegionClass::PageBoundary,
        RegionClass::LibraryMarker,
        RegionClass::Decorator,
        RegionClass::Picture,
        RegionClass::PhysicalDegradation,
        RegionClass::BoundaryLine,
    ];

    /// Column order used by the class-wise metric table.
    pub const METRIC_ORDER: [RegionClass; 9] = [
        RegionClass::Hole,
        RegionClass::CharacterLineSegment,
        RegionClass::PhysicalDegradation,
        RegionClass::PageBoundary,
        RegionClass::CharacterComponent,
        RegionClass::Picture,
        RegionClass::Decorator,
        RegionClass::LibraryMarker,
        RegionClass::BoundaryLine,
    ];

    pub fn abbreviation(self) -> &'static str {
        match self {
            RegionClass::CharacterLineSegment => "CLS",
            RegionClass::CharacterComponent => "CC",
            RegionClass::Hole => "H",
            RegionClass::PageBoundary => "PB",
            RegionClass::LibraryMarker => "LM",
            RegionClass::Decorator => "D",
            RegionClass::Picture => "P",
            RegionClass::PhysicalDegradation => "PD",
            RegionClass::BoundaryLine => "BL",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionClass::CharacterLineSegment => "Character Line Segment",
            RegionClass::CharacterComponent => "Character Component",
            RegionClass::Hole => "Hole",
            RegionClass::PageBoundary => "Page Boundary",
            RegionClass::LibraryMarker => "Library Marker",
            RegionClass::Decorator => "Decorator",
            RegionClass::Picture => "Picture",
            RegionClass::PhysicalDegradation => "Physical Degradation",
            RegionClass::BoundaryLine => "Boundary Line",
        }
    }

    pub fn from_abbreviation(abbr: &str) -> Option<RegionClass> {
        Self::ALL.into_iter().find(|c| c.abbreviation() == abbr)
    }

    /// Position in [`RegionClass::ALL`], in `0..9`.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(index: usize) -> Option<RegionClass> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbreviation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Polygon,
    Freehand,
}

/// A closed region boundary in image-pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    kind: ShapeKind,
    vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(kind: ShapeKind, vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(CorpusError::Polygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CorpusError::Polygon("non-finite coordinate".into()));
        }
        if kind == ShapeKind::Rectangle && !is_axis_aligned_box(&vertices) {
            return Err(CorpusError::Polygon(
                "rectangle must have exactly 4 vertices forming an axis-aligned box".into(),
            ));
        }
        Ok(Polygon { kind, vertices })
    }

    /// Axis-aligned rectangle with corners `(x1, y1)` and `(x2, y2)`.
    pub fn rectangle(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Polygon::new(
            ShapeKind::Rectangle,
            vec![[x1, y1], [x2, y1], [x2, y2], [x1, y2]],
        )
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Shoelace area (absolute value).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc.abs() * 0.5
    }

    /// `(x_min, y_min, x_max, y_max)` over the vertices.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &[x, y] in &self.vertices {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }

    /// Applies `f` to each vertex, keeping the shape kind.
    pub fn map_vertices(&self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> Polygon {
        Polygon {
            kind: self.kind,
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
        }
    }

    fn clamp_to(&mut self, width: f64, height: f64) -> bool {
        let mut changed = false;
        for v in &mut self.vertices {
            let cx = v[0].clamp(0.0, width);
            let cy = v[1].clamp(0.0, height);
            if cx != v[0] || cy != v[1] {
                changed = true;
                *v = [cx, cy];
            }
        }
        changed
    }
}

fn is_axis_aligned_box(v: &[[f64; 2]]) -> bool {
    if v.len() != 4 {
        return false;
    }
    // Consecutive edges must alternate between horizontal and vertical.
    let horizontal = |a: [f64; 2], b: [f64; 2]| a[1] == b[1];
    let vertical = |a: [f64; 2], b: [f64; 2]| a[0] == b[0];
    let edges_hv = (0..4).all(|i| {
        let (a, b) = (v[i], v[(i + 1) % 4]);
        if i % 2 == 0 {
            horizontal(a, b)
        } else {
            vertical(a, b)
        }
    });
    let edges_vh = (0..4).all(|i| {
        let (a, b) = (v[i], v[(i + 1) % 4]);
        if i % 2 == 0 {
            vertical(a, b)
        } else {
            horizontal(a, b)
        }
    });
    edges_hv || edges_vh
}

#[derive(Serialize, Deserialize)]
struct RawPolygon {
    kind: ShapeKind,
    points: Vec<f64>,
}

impl Serialize for Polygon {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        RawPolygon {
            kind: self.kind,
            points: self.vertices.iter().flatten().copied().collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Polygon {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = RawPolygon::deserialize(deserializer)?;
        if raw.points.len() % 2 != 0 {
            return Err(serde::de::Error::custom(
                "points must be a flat [x1,y1,x2,y2,...] list of even length",
            ));
        }
        let vertices = raw.points.chunks(2).map(|c| [c[0], c[1]]).collect();
        Polygon::new(raw.kind, vertices).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionInstance {
    #[serde(rename = "class")]
    pub region_class: RegionClass,
    pub boundary: Polygon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default)]
    pub revision: u32,
    /// Confidence for predicted regions; absent on ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RegionInstance {
    pub fn new(region_class: RegionClass, boundary: Polygon) -> Self {
        RegionInstance {
            region_class,
            boundary,
            annotator_id: None,
            revision: 0,
            score: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Collection {
    #[serde(rename = "PIH")]
    Pih,
    #[serde(rename = "Bhoomi")]
    Bhoomi,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Collection {
    pub const ALL: [Collection; 3] = [Collection::Pih, Collection::Bhoomi, Collection::Synthetic];

    pub fn label(self) -> &'static str {
        match self {
            Collection::Pih => "PIH",
            Collection::Bhoomi => "Bhoomi",
            Collection::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One manuscript image and all of its (possibly overlapping) regions.
///
/// Multi-page images stay a single document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAnnotation {
    pub doc_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub collection: Collection,
    pub script: String,
    #[serde(default)]
    pub regions: Vec<RegionInstance>,
}

impl DocumentAnnotation {
    /// Checks the document invariants, clamping out-of-bounds vertices.
    ///
    /// Returns the number of regions that needed clamping. A region that lies
    /// entirely outside the image collapses to zero area and is rejected.
    pub fn validate(&mut self) -> Result<usize> {
        if self.width == 0 || self.height == 0 {
            return Err(CorpusError::Validation {
                doc_id: self.doc_id.clone(),
                message: format!("image dimensions {}x{} must be >= 1", self.width, self.height),
            });
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let mut clamped = 0;
        for (i, region) in self.regions.iter_mut().enumerate() {
            let before = region.boundary.area();
            if region.boundary.clamp_to(w, h) {
                clamped += 1;
                if region.boundary.area() == 0.0 && before > 0.0 {
                    return Err(CorpusError::Validation {
                        doc_id: self.doc_id.clone(),
                        message: format!(
                            "region {i} ({}) lies outside the {}x{} image",
                            region.region_class, self.width, self.height
                        ),
                    });
                }
            }
            if let Some(s) = region.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(CorpusError::Validation {
                        doc_id: self.doc_id.clone(),
                        message: format!("region {i} score {s} outside [0,1]"),
                    });
                }
            }
        }
        if clamped > 0 {
            log::warn!(
                "doc {}: clamped {clamped} region(s) to image bounds {}x{}",
                self.doc_id,
                self.width,
                self.height
            );
        }
        Ok(clamped)
    }
}

#[derive(Serialize)]
struct AnnotationFileOut<'a> {
    format: &'static str,
    version: u32,
    documents: &'a [DocumentAnnotation],
}

#[derive(Deserialize)]
struct AnnotationFileIn {
    format: String,
    version: u32,
    documents: Vec<serde_json::Value>,
}

/// Parses an annotation file body.
pub fn parse_annotations(text: &str) -> Result<Vec<DocumentAnnotation>> {
    let file: AnnotationFileIn =
        serde_json::from_str(text).map_err(|e| CorpusError::Syntax(e.to_string()))?;
    if file.format != ANNOTATION_FORMAT {
        return Err(CorpusError::Syntax(format!(
            "expected format {ANNOTATION_FORMAT:?}, found {:?}",
            file.format
        )));
    }
    if file.version != FORMAT_VERSION {
        return Err(CorpusError::Syntax(format!(
            "unsupported version {}",
            file.version
        )));
    }
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(file.documents.len());
    for (index, value) in file.documents.into_iter().enumerate() {
        let doc_id = value
            .get("doc_id")
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        let mut doc: DocumentAnnotation =
            serde_json::from_value(value).map_err(|e| CorpusError::Record {
                index,
                doc_id,
                message: e.to_string(),
            })?;
        doc.validate()?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Serializes documents in the canonical on-disk layout.
pub fn render_annotations(docs: &[DocumentAnnotation]) -> String {
    let mut out = serde_json::to_string_pretty(&AnnotationFileOut {
        format: ANNOTATION_FORMAT,
        version: FORMAT_VERSION,
        documents: docs,
    })
    .expect("annotation documents always serialize");
    out.push('\n');
    out
}

pub fn parse_annotation_file(path: impl AsRef<Path>) -> Result<Vec<DocumentAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_annotations(&text)
}

pub fn write_annotation_file(docs: &[DocumentAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_annotations(docs)).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

/// doc_id → split. Each doc_id appears once, so splits are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    splits: BTreeMap<String, Split>,
}

impl CorpusManifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assigns `doc_id`; returns the previous split if it was already assigned.
    pub fn assign(&mut self, doc_id: impl Into<String>, split: Split) -> Option<Split> {
        self.splits.insert(doc_id.into(), split)
    }

    pub fn split_of(&self, doc_id: &str) -> Option<Split> {
        self.splits.get(doc_id).copied()
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.splits.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn doc_ids(&self, split: Split) -> Vec<&str> {
        self.iter()
            .filter(|&(_, s)| s == split)
            .map(|(id, _)| id)
            .collect()
    }
}

struct UniqueSplits(BTreeMap<String, Split>);

impl<'de> Deserialize<'de> for UniqueSplits {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueSplits;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of doc_id to split")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, Split>()? {
                    if out.insert(k.clone(), v).is_some() {
                        return Err(serde::de::Error::custom(format!(
                            "doc_id {k:?} assigned more than once"
                        )));
                    }
                }
                Ok(UniqueSplits(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

#[derive(Deserialize)]
struct ManifestIn {
    format: String,
    version: u32,
    splits: UniqueSplits,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    format: &'static str,
    version: u32,
    splits: &'a BTreeMap<String, Split>,
}

pub fn parse_manifest(text: &str) -> Result<CorpusManifest> {
    let m: ManifestIn = serde_json::from_str(text).map_err(|e| CorpusError::Syntax(e.to_string()))?;
    if m.format != MANIFEST_FORMAT || m.version != FORMAT_VERSION {
        return Err(CorpusError::Syntax(format!(
            "expected {MANIFEST_FORMAT} v{FORMAT_VERSION}, found {} v{}",
            m.format, m.version
        )));
    }
    Ok(CorpusManifest { splits: m.splits.0 })
}

pub fn render_manifest(manifest: &CorpusManifest) -> String {
    let mut out = serde_json::to_string_pretty(&ManifestOut {
        format: MANIFEST_FORMAT,
        version: FORMAT_VERSION,
        splits: &manifest.splits,
    })
    .expect("manifest always serializes");
    out.push('\n');
    out
}

pub fn read_manifest_file(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_manifest(&text)
}

pub fn write_manifest_file(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_manifest(manifest)).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Region counts per class and collection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RegionStatistics {
    pub counts: BTreeMap<Collection, [usize; RegionClass::COUNT]>,
}

impl RegionStatistics {
    pub fn count(&self, class: RegionClass, collection: Collection) -> usize {
        self.counts
            .get(&collection)
            .map_or(0, |row| row[class.index()])
    }

    /// Column sum over collections (the "Combined" row).
    pub fn combined(&self, class: RegionClass) -> usize {
        self.counts.values().map(|row| row[class.index()]).sum()
    }

    pub fn render_table(&self) -> String {
        let mut out = format!("{:<12}", "");
        for c in RegionClass::ALL {
            out.push_str(&format!("{:>7}", c.abbreviation()));
        }
        out.push('\n');
        let row = |label: &str, f: &dyn Fn(RegionClass) -> usize| {
            let mut line = format!("{label:<12}");
            for c in RegionClass::ALL {
                let n = f(c);
                if n == 0 {
                    line.push_str(&format!("{:>7}", "-"));
                } else {
                    line.push_str(&format!("{n:>7}"));
                }
            }
            line.push('\n');
            line
        };
        for coll in self.counts.keys() {
            out.push_str(&row(coll.label(), &|c| self.count(c, *coll)));
        }
        out.push_str(&row("Combined", &|c| self.combined(c)));
        out
    }
}

pub fn compute_region_statistics(docs: &[DocumentAnnotation]) -> RegionStatistics {
    let mut stats = RegionStatistics::default();
    for doc in docs {
        let row = stats
            .counts
            .entry(doc.collection)
            .or_insert([0; RegionClass::COUNT]);
        for r in &doc.regions {
            row[r.region_class.index()] += 1;
        }
    }
    stats
}

/// Per-collection document counts for train/validation/test.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub per_collection: BTreeMap<Collection, [usize; 3]>,
}

impl SplitCounts {
    pub fn get(&self, collection: Collection, split: Split) -> usize {
        self.per_collection
            .get(&collection)
            .map_or(0, |row| row[split as usize])
    }

    pub fn total(&self, split: Split) -> usize {
        self.per_collection.values().map(|row| row[split as usize]).sum()
    }

    pub fn grand_total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.total(s)).sum()
    }
}

pub fn split_counts(manifest: &CorpusManifest, docs: &[DocumentAnnotation]) -> Result<SplitCounts> {
    let missing: Vec<String> = docs
        .iter()
        .filter(|d| manifest.split_of(&d.doc_id).is_none())
        .map(|d| d.doc_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CorpusError::MissingSplit(missing));
    }
    let mut counts = SplitCounts::default();
    for doc in docs {
        let split = manifest.split_of(&doc.doc_id).unwrap();
        counts.per_collection.entry(doc.collection).or_insert([0; 3])[split as usize] += 1;
    }
    Ok(counts)
}
