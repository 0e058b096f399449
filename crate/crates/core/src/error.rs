use thiserror::Error;

/// Errors produced by every stage of the codec.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or kernel settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input that is valid in form but cannot be processed (empty, zero extent, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A value that does not fit its fixed-point slot.
    #[error("parameter `{name}` out of range: {value}")]
    Range { name: String, value: f64 },

    /// Malformed text or binary input. `position` is a byte offset or a
    /// 1-based line number depending on `unit`.
    #[error("parse error at {unit} {position}: {message}")]
    Parse {
        unit: &'static str,
        position: usize,
        message: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bitstream-level failure while decoding.
    #[error("decode error: {0}")]
    Decode(String),

    #[error("fitting error: {0}")]
    Fitting(String),

    #[error("training error: {0}")]
    Training(String),

    /// Metric inputs that admit no answer, such as RD curves without overlap.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_byte(position: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            unit: "byte",
            position,
            message: message.into(),
        }
    }

    pub(crate) fn at_line(position: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            unit: "line",
            position,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
