use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("rematerialization integrity error: {0}")]
    Integrity(String),

    #[error("singular x0 prediction at step {step}: marginal mean coefficient {coefficient:e} below 1e-8")]
    Singularity { step: usize, coefficient: f64 },

    #[error("initialization error: coefficient {name} = {value} lies outside (0, 1)")]
    Initialization { name: String, value: f64 },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("schedule fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn domain_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Domain {
        op,
        detail: detail.into(),
    }
}
