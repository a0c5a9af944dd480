use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdmError>;

#[derive(Debug, Error)]
pub enum CdmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: file contains no data rows")]
    EmptyFile(PathBuf),

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("label column `{0}` not found in header")]
    UnknownLabelColumn(String),

    #[error("line {line}: feature index {index} outside 1..={dim}")]
    IndexOutOfRange { line: usize, index: usize, dim: usize },

    #[error("line {line}: malformed token `{token}`")]
    MalformedToken { line: usize, token: String },

    #[error("line {line}: feature index {index} does not increase")]
    DecreasingIndex { line: usize, index: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("data has zero total variance")]
    ZeroVariance,

    #[error("class `{class}` has {available} instances, {requested} requested")]
    InsufficientClassCount {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("class `{0}` has no instances")]
    EmptyClass(String),

    #[error("class sets differ: {0}")]
    ClassMismatch(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("normal matrix is singular; use a positive ridge weight")]
    SingularSystem,

    #[error("scatter matrices are degenerate: {0}")]
    DegenerateScatter(String),

    #[error("{what} did not converge after {iterations} iterations (gap {gap:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        gap: f64,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CdmError>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl CdmError {
    /// Wraps an error with the pipeline stage that produced it.
    pub fn at(stage: &'static str) -> impl FnOnce(CdmError) -> CdmError {
        move |source| CdmError::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CdmError::Io { .. } => "io",
            CdmError::EmptyFile(_) => "empty_file",
            CdmError::Parse { .. } => "parse",
            CdmError::UnknownLabelColumn(_) => "unknown_label_column",
            CdmError::IndexOutOfRange { .. } => "index_out_of_range",
            CdmError::MalformedToken { .. } => "malformed_token",
            CdmError::DecreasingIndex { .. } => "decreasing_index",
            CdmError::DimensionMismatch { .. } => "dimension_mismatch",
            CdmError::InvalidArgument(_) => "invalid_argument",
            CdmError::NonFinite(_) => "non_finite",
            CdmError::ZeroVariance => "zero_variance",
            CdmError::InsufficientClassCount { .. } => "insufficient_class_count",
            CdmError::EmptyClass(_) => "empty_class",
            CdmError::ClassMismatch(_) => "class_mismatch",
            CdmError::NotPositiveDefinite => "not_positive_definite",
            CdmError::SingularSystem => "singular_system",
            CdmError::DegenerateScatter(_) => "degenerate_scatter",
            CdmError::NonConvergence { .. } => "non_convergence",
            CdmError::Stage { source, .. } => source.kind(),
            CdmError::Config(_) => "config",
            CdmError::Serialization(_) => "serialization",
        }
    }
}
