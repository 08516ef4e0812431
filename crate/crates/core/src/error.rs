use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "quadrature did not converge: {message} (frequency cutoff {cutoff}, estimated error {estimated_error:e})"
    )]
    Quadrature {
        message: String,
        cutoff: f64,
        estimated_error: f64,
    },

    #[error("divergent integral: {0}")]
    Divergent(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("propagation failed: {0}")]
    Propagation(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{} validation error(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Quadrature { .. } => "quadrature",
            Error::Divergent(_) => "divergent",
            Error::Data(_) => "data",
            Error::Fit(_) => "fit",
            Error::Propagation(_) => "propagation",
            Error::Alignment(_) => "alignment",
            Error::Validation(_) => "validation",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
