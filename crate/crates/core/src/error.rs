use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is not symmetric: |K[{row}][{col}] - K[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    /// Cholesky factorization hit a non-positive pivot. `minor` is the
    /// 1-based order of the leading principal minor that is not positive.
    #[error("decomposition failed: leading minor of order {minor} is not positive definite (pivot {pivot:e})")]
    Decomposition { minor: usize, pivot: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("config error for `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
