use std::path::PathBuf;

/// Errors produced by the engine, the data pipeline and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite values produced at {stage}")]
    NonFinite { stage: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract { .. } => "contract",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::CorruptWeights(_) => "corrupt_weights",
            Error::MissingParam(_) => "missing_param",
            Error::ParamShape { .. } => "shape_mismatch",
            Error::Config { .. } => "config",
            Error::Diverged { .. } => "diverged",
        }
    }
}

/// Early-return a contract violation unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !std::convert::identity($cond) {
            return Err($crate::error::Error::contract($op, format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
