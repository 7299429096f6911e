use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HfdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HfdError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("infeasible constraint request: {0}")]
    InfeasibleRequest(String),

    #[error("bad fold count {k} for {n} points")]
    BadFoldCount { k: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty constraint set: {0}")]
    EmptyConstraintSet(&'static str),

    #[error("at least one cannot-link constraint is required")]
    EmptyCannotLink,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("non-finite value in solver iterate (check input scaling)")]
    NonFinite,

    #[error("too few points: {got} points cannot satisfy a floor of {min_membership} per side")]
    TooFewPoints { got: usize, min_membership: usize },

    #[error("bad feature subset size {d_k} for {d} features")]
    BadSubsetSize { d_k: usize, d: usize },

    #[error("degenerate split after {attempts} attempts")]
    DegenerateSplit { attempts: usize },

    #[error("insufficient candidates: {found} candidates for k = {k}; increase k_O")]
    InsufficientCandidates { found: usize, k: usize },

    #[error("dataset has no labels")]
    UnlabeledData,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported model format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HfdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HfdError::Io {
            path: path.into(),
            source,
        }
    }
}
