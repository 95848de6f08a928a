use thiserror::Error;

/// Errors raised by the numeric core and the adapter layers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward must start from a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("task id {task} out of range for {n_tasks} task experts")]
    TaskOutOfRange { task: usize, n_tasks: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for table with {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },

    #[error("no routing statistics collected")]
    EmptyStats,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
