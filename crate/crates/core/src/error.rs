use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` holds no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite value at coordinate {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("attention row {row} has no visible key")]
    FullyMaskedRow { row: usize },

    #[error("{name} is non-finite ({value})")]
    NonFiniteTerm { name: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("shape error at row {row}: {message}")]
    RowShape { row: usize, message: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::AxisOutOfRange { .. } => "axis_out_of_range",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::MissingGradient(_) => "missing_gradient",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::NonFinite { .. } => "non_finite",
            Error::FullyMaskedRow { .. } => "fully_masked_row",
            Error::NonFiniteTerm { .. } => "non_finite_term",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::RowShape { .. } => "row_shape",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::NotPsd { .. } => "not_psd",
            Error::Config(_) => "config",
            Error::Diverged(_) => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
