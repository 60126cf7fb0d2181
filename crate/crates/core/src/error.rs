use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: String, index: usize },

    #[error("graph6 parse error at byte {offset}: {reason}")]
    Graph6 { offset: usize, reason: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("unknown graph set `{0}`")]
    UnknownGraphSet(String),

    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("check failed: {0}")]
    Check(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
