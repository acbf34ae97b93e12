//! Raster file I/O through the `image` crate.

use std::path::{Path, PathBuf};

use mslayout_core::preprocess::RgbImage;
use mslayout_core::synth::GrayImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .is_some_and(|e| e == "png")
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, RasterError> {
    let img = image::open(path)
        .map_err(|source| RasterError::Read {
            path: path.to_owned(),
            source,
        })?
        .into_rgb8();
    Ok(RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<(), RasterError> {
    let err = |source| RasterError::Write {
        path: path.to_owned(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| err(image::ImageError::IoError(e)))?;
    }
    image::save_buffer(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(err)
}
