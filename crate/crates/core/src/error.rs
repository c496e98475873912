use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("cannot place {requested} edges among {available} node pairs")]
    Capacity { requested: usize, available: usize },

    #[error("snapshot has {have} edges, need at least {need}")]
    TooFewEdges { have: usize, need: usize },

    #[error("snapshot {0}: no positive target edges")]
    EmptyTarget(usize),

    #[error("node {node} is not active in the evaluated snapshot")]
    InactiveNode { node: usize },

    #[error("classification needs at least two classes on both sides of the split")]
    SingleClass,

    #[error("invalid config value for `{field}`: {msg}")]
    Config { field: &'static str, msg: String },

    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn config(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            field,
            msg: msg.into(),
        }
    }
}
