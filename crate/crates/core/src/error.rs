use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("field has no valid pixel")]
    AllMissing,
    #[error("value {0} is not strictly positive and cannot be log-transformed")]
    NonPositiveValue(f64),
    #[error("valid values have zero variance")]
    ZeroVariance,
    #[error("bad magic in {path}: expected `{expected}`, found `{found}`")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("selection contains no frame")]
    EmptySelection,
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("requested {requested} modes but at most {max} are available")]
    RankTooLarge { requested: usize, max: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("solver diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("spatial dimensions {h}x{w} must both be even")]
    OddDimensions { h: usize, w: usize },
    #[error("patch {patch_h}x{patch_w} does not fit in domain {h}x{w}")]
    PatchTooLarge {
        patch_h: usize,
        patch_w: usize,
        h: usize,
        w: usize,
    },
    #[error("ocean pixel ({row}, {col}) is not covered by any patch")]
    CoverageGap { row: usize, col: usize },
    #[error("evaluation mask is empty")]
    EmptyMask,
    #[error("target value is zero at an evaluated pixel")]
    ZeroTarget,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
