use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f64),

    #[error("unknown face-parsing class id {0} (valid ids are 0..19)")]
    UnknownClass(u8),

    #[error("unknown face component `{name}` (valid: eyes, nose, mouth)")]
    UnknownComponent { name: String },

    #[error("unknown backbone layer `{name}` (available: {})", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("empty hole region: {0}; skip the contextual term for this sample")]
    EmptyHole(String),

    #[error("image of size {height}x{width} is too small for {levels} MS-SSIM levels (minimum side {minimum})")]
    TooSmall {
        height: usize,
        width: usize,
        levels: usize,
        minimum: usize,
    },

    #[error("loss term `{term}` is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("missing dataset files for id `{id}`: {detail}")]
    MissingData { id: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("training diverged at step {step}: {report}")]
    Diverged { step: u64, report: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
