use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DktError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DktError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient data for biomarker `{biomarker}`: {count} measurements, need at least {required}")]
    InsufficientData {
        biomarker: String,
        count: usize,
        required: usize,
    },

    #[error("no measurements for disease {disease} in unit {unit}")]
    EmptyBlock { disease: usize, unit: usize },

    #[error("unknown biomarker `{0}`")]
    UnknownBiomarker(String),

    #[error("unknown disease `{0}`")]
    UnknownDisease(String),

    #[error("degenerate noise: biomarker `{biomarker}` has zero variance but carries measurements")]
    DegenerateNoise { biomarker: String },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    SingularKernel { jitter: f64 },

    #[error("too few valid bootstrap resamples: {valid} of {total}")]
    TooFewValidResamples { valid: usize, total: usize },

    #[error("unsupported model schema version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptFile(String),
}

impl DktError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DktError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DktError::DegenerateNoise { .. }
                | DktError::SolverFailure(_)
                | DktError::SingularKernel { .. }
                | DktError::RankDeficient(_)
                | DktError::TooFewValidResamples { .. }
        )
    }
}
