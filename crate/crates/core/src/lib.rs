//! Density-aware single-image rain removal.
//!
//! The crate bundles a procedural rain synthesizer with density labels, PSNR
//! and SSIM metrics, a small reverse-mode autodiff engine, the dense-block
//! network pieces, the residual-aware density classifier, the multi-stream
//! de-raining network and the training harness that drives them.

pub mod classifier;
pub mod derainer;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod label;
pub mod metrics;
pub mod netblocks;
pub mod params;
pub mod raingen;
pub mod tensor;
pub mod trainer;

pub use label::DensityLabel;
pub use params::ParamStore;
pub use tensor::Tensor;

use std::path::PathBuf;

/// Every failure the library reports. Variant names double as the stable
/// identifiers printed by the command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("ShapeTooSmall: {0}")]
    ShapeTooSmall(String),
    #[error("TooSmall: {0}")]
    TooSmall(String),
    #[error("ChannelMismatch: {0}")]
    ChannelMismatch(String),
    #[error("IndivisibleDims: spatial dims {height}x{width} must be divisible by {divisor}")]
    IndivisibleDims { height: usize, width: usize, divisor: usize },
    #[error("EmptyCleanDir: no decodable images in {0}")]
    EmptyCleanDir(PathBuf),
    #[error("WriteFailure: {path}: {source}")]
    WriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("MissingOutput: no model output for record `{0}`")]
    MissingOutput(String),
    #[error("UntrainedModel: {0}")]
    UntrainedModel(String),
    #[error("EmptyManifest: {0}")]
    EmptyManifest(String),
    #[error("DivergenceDetected: non-finite loss at step {step}")]
    DivergenceDetected {
        step: usize,
        last_good: Option<Box<trainer::Checkpoint>>,
    },
    #[error("MissingLabelClass: training data has no `{0}` samples")]
    MissingLabelClass(DensityLabel),
    #[error("CorruptCheckpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("ConfigMismatch: {0}")]
    ConfigMismatch(String),
    #[error("CropTooLarge: {0}")]
    CropTooLarge(String),
    #[error("CorruptDataset: {0}")]
    CorruptDataset(String),
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("Image: {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::WriteFailure { path: path.into(), source }
    }
}
