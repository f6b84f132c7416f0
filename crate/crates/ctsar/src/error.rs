//! Error type shared across the crate.
//!
//! Variants are grouped by the exit-code contract of the CLI:
//! usage errors exit 1, data errors exit 2, numeric/validation errors exit 3.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- usage ----
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("invalid value for config key `{key}`: `{value}`")]
    InvalidConfigValue { key: String, value: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // ---- data ----
    #[error("dataset root `{0}` is missing or not a directory")]
    MissingDataset(PathBuf),
    #[error("missing class directory `{0}`")]
    MissingClassDir(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt image file `{path}`: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("checkpoint `{path}`: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint `{0}`: CRC mismatch")]
    ChecksumMismatch(PathBuf),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    EmptyDataset,

    // ---- numeric / validation ----
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("inner dimensions disagree: [{m}x{k}] x [{k2}x{n}]")]
    InnerDimMismatch { m: usize, k: usize, k2: usize, n: usize },
    #[error("axis {axis} is out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("backward expects a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor does not belong to this tape")]
    DetachedTensor,
    #[error("channel mismatch: input has {input}, weight expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("convolution output extent would be non-positive for input {h}x{w}")]
    NonPositiveOutput { h: usize, w: usize },
    #[error("pool input {h}x{w} is smaller than the {kh}x{kw} kernel")]
    InputSmallerThanKernel {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    #[error("input {h}x{w} is smaller than the {oh}x{ow} output grid")]
    InputSmallerThanGrid {
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    #[error("attention requires channels divisible by 8, got {0}")]
    ChannelsNotDivisible(usize),
    #[error("feature count mismatch: input has {input}, weight expects {expected}")]
    FeatureMismatch { input: usize, expected: usize },
    #[error("label {0} out of range 0..4")]
    LabelOutOfRange(usize),
    #[error("class {0} has zero samples; cannot derive a weight")]
    ZeroCountClass(usize),
    #[error("gradient check failed for {layer}: max relative error {err:.3e} > {tol:.1e}")]
    GradCheckFailed { layer: String, err: f64, tol: f64 },
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
}

/// Exit-code category for the CLI contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            UnknownConfigKey(_) | InvalidConfigValue { .. } | InvalidArgument(_) => {
                ErrorClass::Usage
            }
            MissingDataset(_) | MissingClassDir(_) | UnsupportedFormat(_)
            | CorruptImage { .. } | BadCheckpoint { .. } | ChecksumMismatch(_) | Io { .. }
            | EmptyDataset => ErrorClass::Data,
            _ => ErrorClass::Numeric,
        }
    }

    /// Stable CLI exit code: 1 usage, 2 data, 3 numeric/validation.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
