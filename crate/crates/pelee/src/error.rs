use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Structural problem in a computation graph (cycle, bad reference,
    /// invalid attribute, missing tap node, ...).
    #[error("invalid graph: {0}")]
    Graph(String),

    /// A weight referenced by a node is absent from the store.
    #[error("missing weight '{0}'")]
    MissingWeight(String),

    /// A stored weight exists but its shape does not match the node.
    #[error("weight '{name}' has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Bad argument or configuration value.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A file exists and was read but its contents are not understood.
    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    /// 2 usage, 3 validation/shape, 4 i/o or file-format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) => 2,
            Error::Shape(_)
            | Error::Graph(_)
            | Error::MissingWeight(_)
            | Error::WeightShape { .. } => 3,
            Error::Format(_) | Error::Io(_) | Error::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
