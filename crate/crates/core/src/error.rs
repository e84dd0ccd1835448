use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("learned variance is disabled for this model")]
    VarianceDisabled,

    #[error(
        "non-finite loss at iteration {iteration} (t = {steps:?}): total {total}, disent {disent}, recon {recon}, vlb {vlb}"
    )]
    NonFiniteLoss {
        iteration: usize,
        steps: Vec<usize>,
        total: f64,
        disent: f64,
        recon: f64,
        vlb: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRange(_) => "invalid_range",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::Domain(_) => "domain",
            Error::Empty(_) => "empty",
            Error::Config(_) => "config",
            Error::VarianceDisabled => "variance_disabled",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
