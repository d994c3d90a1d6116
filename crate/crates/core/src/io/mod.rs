//! File formats: PFM for lossless HDR, PNG for 8-bit LDR frames, and the
//! JSON dataset manifest binding frames, groups, and ground truth together.

pub mod dataset;
pub mod pfm;
pub mod pngio;

pub use crate::tensor::checkpoint::write_atomic;

use crate::capture::CaptureError;
use crate::radiometry::RadiometryError;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
}
