use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("unknown vertex {0}")]
    UnknownVertex(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("family mismatch: {0}")]
    FamilyMismatch(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure in {context}: {detail}")]
    Numeric { context: String, detail: String },
    #[error("sampling failure: {0}")]
    Sampling(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("size bound exceeded: {0}")]
    SizeBound(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("edge {edge}: {source}")]
    AtEdge {
        edge: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn at_edge(self, edge: usize) -> Self {
        match self {
            e @ Error::AtEdge { .. } => e,
            other => Error::AtEdge {
                edge,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, with edge context stripped.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::AtEdge { source, .. } => source.root_cause(),
            e => e,
        }
    }

    /// True for failures of the numerics (as opposed to malformed input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root_cause(),
            Error::Numeric { .. } | Error::Sampling(_) | Error::Domain(_)
        )
    }
}
