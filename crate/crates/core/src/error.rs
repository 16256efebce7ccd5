use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid sub-intensity matrix: {0}")]
    InvalidSubIntensity(String),

    #[error("unsupported spectrum: {0}")]
    UnsupportedSpectrum(String),

    /// A density or interval probability fell below the representable range.
    #[error("underflow at observation {index}: {detail}")]
    Underflow { index: usize, detail: String },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Underflow { .. } | Error::Estimation(_) | Error::UnsupportedSpectrum(_) => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
