use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("missing mask for sample `{id}`: {path}")]
    MissingMask { id: String, path: PathBuf },

    #[error("mask `{id}` contains label value {value} outside {{0,1,2}}")]
    InvalidLabel { id: String, value: u8 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("DSC_m threshold {phi} not reached within {epochs} epochs (best {best:.4}, seed {seed})")]
    ThresholdNotReached {
        phi: f64,
        best: f64,
        epochs: usize,
        seed: u64,
    },

    #[error("non-finite loss at step {step} (batch ids: {ids:?})")]
    NonFiniteLoss { step: u64, ids: Vec<String> },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io_at(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        let path = path.into();
        Error::Io(std::io::Error::new(
            err.kind(),
            format!("{}: {err}", path.display()),
        ))
    }
}
