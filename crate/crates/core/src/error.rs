use thiserror::Error;

use crate::transfer::TransferMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("requested rank {requested} exceeds min(m, n) = {limit}")]
    Rank { requested: usize, limit: usize },

    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),

    #[error("model has no modules to pair")]
    EmptyModel,

    #[error("malformed archive: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("no such module: `{0}`")]
    MissingKey(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("input too large for the dense oracle: {0}")]
    Size(String),

    #[error("no transfers to report")]
    EmptyReport,

    #[error("transfer mode `{0}` is not valid for this operation")]
    InvalidMode(TransferMode),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
