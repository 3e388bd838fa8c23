use std::path::PathBuf;

/// Errors raised anywhere in the pathway-optimization stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pathway: {0}")]
    InvalidPathway(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("no reference entries survived neighbor selection")]
    EmptyNeighborhood,

    #[error("reference set is empty: the model answered no pool sample correctly")]
    EmptyStore,

    #[error("embedding pooled to the zero vector")]
    DegenerateEmbedding,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            found,
        })
    }
}
