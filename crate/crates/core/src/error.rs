use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("gradient check failed: {0}")]
    CheckFailed(String),

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("ctc: alignment infeasible ({frames} frames, reference needs at least {required})")]
    AlignmentInfeasible { frames: usize, required: usize },

    #[error("unknown label id {0}")]
    UnknownLabel(u32),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Data,
    Numeric,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 1,
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::NotScalar(_)
            | Error::CheckFailed(_)
            | Error::TapeConsumed => Category::Numeric,
            Error::Invalid(_) | Error::Unsupported(_) => Category::Usage,
            Error::Config(_) => Category::Config,
            Error::AlignmentInfeasible { .. }
            | Error::UnknownLabel(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::Json(_) => Category::Data,
        }
    }
}
