//! Region-proposal instance segmentation for manuscript layouts: a small
//! CPU tensor toolkit, the network, checkpoints, the staged training loop
//! and the inference pipeline.

pub mod checkpoint;
pub mod infer;
pub mod layers;
pub mod net;
pub mod params;
pub mod roi_align;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use net::{Network, NetworkConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Detect(#[from] mslayout_core::detect::DetectError),
    #[error(transparent)]
    Geometry(#[from] mslayout_core::geometry::GeometryError),
    #[error(transparent)]
    Preprocess(#[from] mslayout_core::preprocess::PreprocessError),
    #[error(transparent)]
    Corpus(#[from] mslayout_core::corpus::CorpusError),
    #[error("input canvas must be 3x{expected}x{expected} values, got {got}")]
    InputSize { expected: usize, got: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint layer {layer}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing layer {0}")]
    MissingLayer(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("no image supplied for training document {0}")]
    MissingImage(String),
    #[error("non-finite {component} loss at stage {stage}, epoch {epoch}, step {step} (document {doc_id})")]
    NonFiniteLoss {
        component: &'static str,
        stage: usize,
        epoch: usize,
        step: usize,
        doc_id: String,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;
