use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum OltError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset line {line}: {message}")]
    DatasetLine { line: usize, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("degenerate mask: layer `{0}` is fully pruned")]
    DegenerateMask(String),

    #[error("{phase} diverged at epoch {epoch} (loss {loss})")]
    Divergence {
        phase: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("unknown scoring kind `{0}`")]
    UnknownScorer(String),

    #[error("{0} requires a fitted auxiliary model")]
    NotFitted(&'static str),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<OltError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OltError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OltError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        OltError::Phase {
            phase,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = OltError> = std::result::Result<T, E>;
