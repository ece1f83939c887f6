//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("camera-frame depth {0} is at or below the near plane")]
    NonPositiveDepth(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("depth distribution at pixel ({row}, {col}) sums to {sum}, expected 1")]
    UnnormalizedDistribution { row: usize, col: usize, sum: f64 },

    #[error("no valid ground-truth pixels to compute the loss over")]
    NoValidPixels,

    #[error("function returned a non-finite value during gradient check")]
    NonFiniteFunction,

    #[error("no frustum candidate lies inside the camera field of view")]
    EmptyFrustum,

    #[error("quaternion norm {0} deviates from 1 beyond tolerance")]
    NonUnitQuaternion(f64),

    #[error("pillar at cell ({0}, {1}) lies outside the BEV grid")]
    OutOfGridPillar(i64, i64),

    #[error("bad magic bytes: expected \"RAGS\"")]
    BadMagic,

    #[error("unsupported container version {0}")]
    VersionMismatch(u16),

    #[error("file length inconsistent with header: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid camera model: {0}")]
    InvalidCamera(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
