//! Crate-wide error type. Variants group into three coarse categories
//! (config, numeric, I/O) that the CLI maps onto exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("target id {target} out of range for {n} classes")]
    TargetOutOfRange { target: usize, n: usize },

    #[error("token id {id} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("batch has no unmasked tokens")]
    DegenerateBatch,

    #[error("numeric check failed in {what}: {detail}")]
    NumericCheck { what: &'static str, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("gamma {gamma}: {source}")]
    AtGamma {
        gamma: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

/// Coarse failure category, used by the CLI for exit codes and the
/// single-line error report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::InvalidConfig(_) => Category::Config,
            Error::Io(_) | Error::Format { .. } => Category::Io,
            Error::AtStep { source, .. } | Error::AtGamma { source, .. } => source.category(),
            _ => Category::Numeric,
        }
    }
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Numeric => 3,
            Category::Io => 4,
        }
    }
}
