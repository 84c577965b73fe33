use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two matrices that must agree in shape do not.
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    /// A hyperparameter or argument violates its documented contract.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A window or index falls outside the available data.
    #[error("out of range: {0}")]
    Range(String),

    /// An input file could not be parsed. `row` and `column` are 1-based and
    /// count the header as row 1.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    /// A factor update produced a non-finite value.
    #[error("numeric divergence{} at iteration {iteration}", chain.map(|c| format!(" in chain {c}")).unwrap_or_default())]
    Diverged { chain: Option<usize>, iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    /// Attach the chain id to a divergence error raised below the protocol layer.
    pub(crate) fn in_chain(self, chain_id: usize) -> Self {
        match self {
            Error::Diverged { iteration, .. } => Error::Diverged {
                chain: Some(chain_id),
                iteration,
            },
            other => other,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Diverged { chain, .. } => Error::Diverged { chain, iteration },
            other => other,
        }
    }

    /// True for errors caused by the numerics rather than by the input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
