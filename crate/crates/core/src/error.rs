use std::path::PathBuf;

/// Errors produced anywhere in the height-estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("degenerate height range: h_min={h_min} must be below h_max={h_max}")]
    DegenerateRange { h_min: f64, h_max: f64 },

    #[error("empty mask: no valid pixels")]
    EmptyMask,

    #[error("non-positive height {value} at pixel {index} (log/ratio undefined)")]
    NonPositive { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Decode {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey(_) => 1,
            Error::NonFinite(_) | Error::Tensor(_) => 3,
            _ => 2,
        }
    }
}
