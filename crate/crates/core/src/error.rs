use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("no valid reference pixels to attend to")]
    NoValidReference,

    #[error("no reference frames available: {0}")]
    NoReference(String),

    #[error("recursion cap {cap} exceeded with {remaining} hole pixels left")]
    RecursionCapExceeded { cap: usize, remaining: usize },

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: String, step: u64 },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Numeric(_) => "numeric",
            Error::DegenerateMask(_) => "degenerate_mask",
            Error::NoValidReference => "no_valid_reference",
            Error::NoReference(_) => "no_reference",
            Error::RecursionCapExceeded { .. } => "recursion_cap",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
