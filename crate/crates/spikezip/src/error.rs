//! Error types and process exit-code mapping.

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/operation shape mismatch. The message names the offending axes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity surfaced in an operation output.
    #[error("non-finite value in {op} at {location}")]
    NonFinite { op: &'static str, location: String },

    /// Internal invariant violation. A bug, not a user mistake.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    /// Bad configuration file or invalid parameter value.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset file problems: bad magic, truncation, out-of-range labels.
    #[error("dataset error: {0}")]
    Data(String),

    /// Checkpoint format or stage-tag problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged or otherwise aborted at runtime.
    #[error("training aborted: {0}")]
    Train(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for shape errors.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 for user-correctable errors, 2 for internal ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 1,
            Error::Shape { .. } => 1,
            Error::NonFinite { .. } | Error::Invariant(_) | Error::Train(_) => 2,
        }
    }

    /// One-line machine-parsable rendering used by the CLI on stderr.
    pub fn machine_line(&self) -> String {
        let kind = match self.exit_code() {
            1 => "user",
            _ => "internal",
        };
        format!("error kind={} code={} msg={:?}", kind, self.exit_code(), self.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
