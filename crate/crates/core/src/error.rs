use std::path::PathBuf;

use thiserror::Error;
use z2p_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("point cloud has no points")]
    EmptyCloud,

    #[error("point cloud is degenerate: all points coincide")]
    DegenerateCloud,

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image {width}x{height} is not divisible by {divisor}")]
    Resolution {
        width: usize,
        height: usize,
        divisor: usize,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter {0} missing from model file")]
    MissingParameter(String),

    #[error("unexpected parameter {0} in model file")]
    UnexpectedParameter(String),

    #[error("non-finite loss at step {step}: total {total}, mse {mse}, magnitude {magnitude}, alpha {alpha}")]
    NonFiniteLoss {
        step: usize,
        total: f64,
        mse: f64,
        magnitude: f64,
        alpha: f64,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("png: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
