use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by tensor construction and operator shape checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("tensor size {0:?} overflows the addressable index range")]
    Overflow([usize; 4]),
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: [usize; 4],
        rhs: [usize; 4],
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl ShapeError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        ShapeError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("weight store does not match config: {0}")]
    WeightMismatch(String),
}

#[derive(Debug, Error)]
pub enum WeightIoError {
    #[error("bad magic bytes in weight file")]
    BadMagic,
    #[error("unsupported weight file version {0:?}")]
    Version(String),
    #[error("weight file truncated: {0}")]
    Truncated(String),
    #[error("manifest entry {name} disagrees with its blob: {msg}")]
    ShapeDisagreement { name: String, msg: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image format error: {0}")]
    Format(String),
    #[error("unsupported PNG bit depth {0} (only 8-bit is supported)")]
    UnsupportedDepth(u8),
    #[error("unsupported PNG color type {0}")]
    UnsupportedColor(String),
    #[error("malformed PNG {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("loss must be a scalar (1,1,1,1) tensor, got {0:?}")]
    NotScalar([usize; 4]),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Failures of a full network evaluation.
#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("layer {layer}: analytic {analytic} MACs vs counted {counted}")]
    Mismatch { layer: String, analytic: u64, counted: u64 },
    #[error("verification resolution {h}x{w} exceeds 64x64")]
    TooLarge { h: usize, w: usize },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
