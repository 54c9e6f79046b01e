use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank {rank} exceeds min(d_in, d_out) = {limit} for layer `{layer}`")]
    Rank {
        rank: usize,
        limit: usize,
        layer: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("annotation {annotation_id}: {reason}")]
    Integrity { annotation_id: u64, reason: String },

    #[error("JSON parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("class {class_id} has only {available} images, {required} required")]
    Coverage {
        class_id: u32,
        available: usize,
        required: usize,
    },

    #[error("incomplete grid, missing cells: {}", .0.join(", "))]
    Incomplete(Vec<String>),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
