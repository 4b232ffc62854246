//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("operator radius {radius} exceeds tile side {tile}")]
    RadiusExceedsTile { radius: usize, tile: usize },
    #[error("operator failed the locality probe: {0}")]
    LocalityViolation(String),
    #[error("cubemap face set must be padded before stitching")]
    UnpaddedFaces,
    #[error("render tape does not match this configuration: {0}")]
    StaleTape(String),
    #[error("gradient cache missing; run cache_image_grad first")]
    MissingGradCache,
    #[error("step1 gradients missing; run step1_faces first")]
    MissingStep1,
    #[error("camera outside the room volume")]
    CameraOutsideRoom,
    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
