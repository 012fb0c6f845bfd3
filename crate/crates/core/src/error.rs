use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}: interaction log is empty")]
    EmptyLog(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("id {index} out of range for table with {rows} rows")]
    Index { index: usize, rows: usize },
    #[error("no content feature for item {0}")]
    Content(usize),
    #[error("element id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

pub(crate) fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if let Some(pos) = xs.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}[{pos}] = {}", xs[pos])));
    }
    Ok(())
}
