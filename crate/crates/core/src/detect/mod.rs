//! Detection math shared by the network, training and inference paths:
//! anchors, box-delta coding, RoI warping, proposal filtering, target
//! assignment and the task losses.

pub mod anchors;
pub mod losses;
pub mod roi;
pub mod rpn;
pub mod targets;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("expected {expected} pyramid levels, got {got}")]
    LevelCount { expected: usize, got: usize },
    #[error("non-finite box deltas {0:?}")]
    NonFiniteDeltas([f64; 4]),
    #[error("degenerate box {0:?}")]
    DegenerateBox(crate::geometry::BBox),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("probabilities must sum to 1 (got {0})")]
    NotADistribution(f64),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("mask must be {expected}x{expected}, got {height}x{width}")]
    MaskSize {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, DetectError>;
