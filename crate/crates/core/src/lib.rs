//! Layout parsing of historical manuscript images: the annotation data model,
//! geometry kernels, detection math, preprocessing, synthetic corpora and
//! evaluation metrics.
//!
//! Everything here is pure Rust without I/O beyond annotation files, so the
//! crate also builds for `wasm32-unknown-unknown`.

pub mod corpus;
pub mod detect;
pub mod eval;
pub mod geometry;
pub mod preprocess;
pub mod synth;
